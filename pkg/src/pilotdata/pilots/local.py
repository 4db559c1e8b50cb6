"""Local filesystem backend (``local://<absolute-path>``).

Pilot-Data are directories, one subdirectory per Data-Unit. Pilots run
tasks as subprocesses inside ``<sandbox>/<cu>/``. Co-located replicas are
symlinked into the sandbox instead of copied.
"""

import fnmatch
import os
import shutil
import subprocess
import time
from urllib.parse import unquote, urlsplit

from ..coordination import short_id
from ..errors import NotFoundError, StagingError, StorageError, ValidationError
from ..topology import AffinityLabel
from ..units import FileEntry, digest_file
from .base import Adaptor, ExecResult, split_service_url, register_adaptor, synthetic_content, synthetic_plan, synthetic_seconds

DEFAULT_LABEL = "localhost"


def _copy_file(src, dst):
    shutil.copyfile(src, dst)


def _local_path(ref):
    if ref.startswith("file://"):
        return unquote(urlsplit(ref).path)
    if "://" in ref:
        raise StagingError(f"local adaptor cannot read {ref!r}")
    return ref


def _entry(path):
    return FileEntry(os.path.getsize(path), digest_file(path))


def _walk(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            full = os.path.join(dirpath, name)
            out[os.path.relpath(full, root).replace(os.sep, "/")] = full
    return out


class LocalAdaptor(Adaptor):
    scheme = "local"
    simulated = False

    def resolve_pilot_label(self, address, affinity):
        return AffinityLabel.parse(affinity if affinity is not None else DEFAULT_LABEL)

    @staticmethod
    def _path(address):
        if not os.path.isabs(address):
            raise ValidationError(f"local:// needs an absolute path, got {address!r}")
        return address

    def init_pilot_data(self, pd):
        root = self._path(split_service_url(pd.description.service_url)[1])
        try:
            os.makedirs(root, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create Pilot-Data directory {root!r}: {exc}") from None
        if not os.access(root, os.W_OK | os.X_OK):
            raise StorageError(f"Pilot-Data directory {root!r} is not writable")
        pd.root = root

    def init_sandbox(self, pilot):
        root = self._path(split_service_url(pilot.description.service_url)[1])
        try:
            os.makedirs(os.path.join(root, "_pilot"), exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create sandbox {root!r}: {exc}") from None
        pilot.sandbox_root = root

    def _du_dir(self, pd, du):
        return os.path.join(pd.root, short_id(du.id))

    def resolve_sources(self, refs):
        out = []
        for ref in refs:
            path = _local_path(ref)
            if not os.path.isfile(path) or not os.access(path, os.R_OK):
                raise StagingError(f"cannot read source file {path!r}")
            size, digest = _entry(path).size, digest_file(path)
            out.append((os.path.basename(path), size, digest, None, path))
        return out

    def ingest(self, pd, du, sources):
        start = time.perf_counter()
        target = self._du_dir(pd, du)
        os.makedirs(target, exist_ok=True)
        for relpath, size, digest, _, path in sources:
            dst = os.path.join(target, relpath)
            _copy_file(path, dst)
            if digest_file(dst) != digest:
                os.unlink(dst)
                raise StagingError(f"digest mismatch after copying {path!r} into {pd.id}")
        return time.perf_counter() - start

    def copy_du(self, du, src_pd, dst_pd):
        start = time.perf_counter()
        src = self._du_dir(src_pd, du)
        dst = self._du_dir(dst_pd, du)
        if not os.path.isdir(src):
            raise StagingError(f"{src_pd.id} holds no copy of {du.id}")
        for relpath, path in _walk(src).items():
            target = os.path.join(dst, relpath)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            _copy_file(path, target)
            if digest_file(target) != du.manifest[relpath].digest:
                shutil.rmtree(dst, ignore_errors=True)
                raise StagingError(f"digest mismatch replicating {du.id}:{relpath} to {dst_pd.id}")
        return time.perf_counter() - start

    def replica_contents(self, pd, du):
        root = self._du_dir(pd, du)
        return {p: _entry(full) for p, full in _walk(root).items()} if os.path.isdir(root) else {}

    def read_file(self, pd, du, relpath):
        path = os.path.join(self._du_dir(pd, du), relpath)
        if not os.path.isfile(path):
            raise NotFoundError(f"{du.id} has no file {relpath!r} on {pd.id}")
        with open(path, "rb") as fh:
            return fh.read()

    def export_du(self, pd, du, destination):
        os.makedirs(destination, exist_ok=True)
        for relpath, path in _walk(self._du_dir(pd, du)).items():
            target = os.path.join(destination, relpath)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            _copy_file(path, target)
        return destination

    def delete_replica(self, pd, du):
        shutil.rmtree(self._du_dir(pd, du), ignore_errors=True)

    def cu_dir(self, pilot, cu_id):
        return os.path.join(pilot.sandbox_root, short_id(cu_id))

    def prepare_sandbox(self, pilot, cu_id):
        os.makedirs(self.cu_dir(pilot, cu_id), exist_ok=True)

    def stage_du(self, du, src_pd, pilot, cu_id, link):
        start = time.perf_counter()
        cu_dir = self.cu_dir(pilot, cu_id)
        os.makedirs(cu_dir, exist_ok=True)
        src = self._du_dir(src_pd, du)
        if not os.path.isdir(src):
            raise StagingError(f"{src_pd.id} holds no copy of {du.id}")
        for relpath, path in _walk(src).items():
            target = os.path.join(cu_dir, relpath)
            if os.path.lexists(target):
                raise StagingError(f"input path collision at {relpath!r} staging {du.id}")
            os.makedirs(os.path.dirname(target), exist_ok=True)
            if link:
                os.symlink(os.path.abspath(path), target)
            else:
                _copy_file(path, target)
        return time.perf_counter() - start

    def sandbox_contents(self, pilot, cu_id):
        return {p: _entry(full) for p, full in _walk(self.cu_dir(pilot, cu_id)).items()}

    def execute(self, pilot, cu, timeout=None, cancel=None):
        desc = cu.description
        cu_dir = self.cu_dir(pilot, cu.id)
        os.makedirs(cu_dir, exist_ok=True)
        stdout_path = os.path.join(cu_dir, "stdout")
        stderr_path = os.path.join(cu_dir, "stderr")
        start = time.perf_counter()
        seconds = synthetic_seconds(desc.executable)
        if seconds is not None:
            return self._run_synthetic(cu, cu_dir, seconds, timeout, cancel, start)
        env = dict(os.environ, PILOT_SANDBOX=os.path.join(pilot.sandbox_root, "_pilot"))
        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            try:
                proc = subprocess.Popen([desc.executable, *desc.arguments], cwd=cu_dir,
                                        stdout=out, stderr=err, env=env)
            except OSError as exc:
                err.write(f"{exc}\n".encode())
                return ExecResult(127, time.perf_counter() - start, str(exc))
            timed_out = canceled = False
            while True:
                try:
                    proc.wait(timeout=0.02)
                    break
                except subprocess.TimeoutExpired:
                    if cancel is not None and cancel.is_set():
                        canceled = True
                    elif timeout is not None and time.perf_counter() - start > timeout:
                        timed_out = True
                    else:
                        continue
                    proc.kill()
                    proc.wait()
                    break
        with open(stderr_path, "r", errors="replace") as fh:
            stderr = fh.read()
        return ExecResult(proc.returncode, time.perf_counter() - start, stderr, timed_out, canceled)

    def _run_synthetic(self, cu, cu_dir, seconds, timeout, cancel, start):
        budget = seconds if timeout is None else min(seconds, timeout)
        waited = cancel.wait(budget) if cancel is not None else time.sleep(budget)
        if waited:
            return ExecResult(-9, time.perf_counter() - start, "canceled", canceled=True)
        if timeout is not None and seconds > timeout:
            return ExecResult(-9, time.perf_counter() - start, "walltime exceeded", timed_out=True)
        outputs, exit_code = synthetic_plan(cu.description.arguments)
        inputs = {p: e.digest for p, e in ((p, _entry(f)) for p, f in _walk(cu_dir).items())}
        for name in outputs:
            path = os.path.join(cu_dir, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(synthetic_content(name, cu.description.arguments, inputs))
        stderr = f"synthetic task exited with {exit_code}" if exit_code else ""
        with open(os.path.join(cu_dir, "stdout"), "wb"):
            pass
        with open(os.path.join(cu_dir, "stderr"), "w") as fh:
            fh.write(stderr)
        return ExecResult(exit_code, time.perf_counter() - start, stderr)

    def collect_outputs(self, pilot, cu_id, exclude, pattern="*"):
        found = _walk(self.cu_dir(pilot, cu_id))
        return {p: _entry(full) for p, full in sorted(found.items())
                if p not in exclude and fnmatch.fnmatch(p, pattern) and not os.path.islink(full)}

    def store_outputs(self, pilot, cu_id, relpaths, du, pd):
        start = time.perf_counter()
        cu_dir = self.cu_dir(pilot, cu_id)
        target = self._du_dir(pd, du)
        for relpath in relpaths:
            src = os.path.join(cu_dir, relpath)
            if not os.path.isfile(src):
                raise StagingError(f"declared output {relpath!r} missing from sandbox of {cu_id}")
            dst = os.path.join(target, relpath)
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            _copy_file(src, dst)
        return time.perf_counter() - start

    def discard_sandbox(self, pilot, cu_id):
        pass


register_adaptor("local", LocalAdaptor)
