import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from proxblock import cli
from proxblock.io import load_matrix, save_matrix


def run(*args):
    return cli.main(list(args))


def manifest(d):
    with open(os.path.join(d, "manifest.json")) as fh:
        return json.load(fh)


def scene(tmp_path, name="scene", **kw):
    out = tmp_path / name
    sets = [f"{k}={v}" for k, v in {"B": 8, "H": 8, "W": 8, "K_true": 2, **kw}.items()]
    args = ["gen-scene", "--set", f"out={out}"]
    for s in sets:
        args += ["--set", s]
    assert run(*args) == 0
    return out


def unmix(tmp_path, data, name="run", **kw):
    out = tmp_path / name
    args = ["unmix", "--set", f"data={data}", "--set", f"out={out}"]
    for k, v in kw.items():
        args += ["--set", f"{k}={v}"]
    return run(*args), out


def trace(d):
    with open(os.path.join(d, "trace.csv")) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def rank_one_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rank1")
    rng = np.random.default_rng(0)
    a, s = rng.random(6) + 0.1, rng.random(20) + 0.1
    D = np.outer(a, s)
    save_matrix(tmp / "D.csv", D)
    code, out = unmix(tmp, tmp / "D.csv", K=1)
    return code, out, D


class TestGenScene:
    def test_noiseless(self, tmp_path):
        out = scene(tmp_path)
        D, A, S = (load_matrix(out / f"{n}.bin") for n in ("D", "A_true", "S_true"))
        assert np.linalg.norm(D - A @ S) == 0
        assert np.all(np.abs(A.sum(axis=0) - 1) <= 1e-12)
        assert A.min() >= 0 and S.min() >= 0
        assert manifest(out)["seed"] == 0

    def test_deterministic(self, tmp_path):
        a = scene(tmp_path, "a", seed=123, noise_sigma=0.01)
        b = scene(tmp_path, "b", seed=123, noise_sigma=0.01)
        for n in ("D", "A_true", "S_true"):
            assert (a / f"{n}.bin").read_bytes() == (b / f"{n}.bin").read_bytes()

    def test_seed_recorded_verbatim(self, tmp_path):
        out = scene(tmp_path, seed=2 ** 64 - 1)
        assert manifest(out)["seed"] == 2 ** 64 - 1

    def test_background_component(self, tmp_path):
        out = scene(tmp_path, background_level=0.5)
        S = load_matrix(out / "S_true.bin")
        assert S.shape == (3, 64)
        assert np.ptp(S[-1]) == 0

    def test_bad_seed(self, tmp_path):
        assert run("gen-scene", "--set", f"out={tmp_path}", "--set", "seed=-1") == 4


class TestUnmix:
    def test_rank_one(self, rank_one_run):
        code, out, D = rank_one_run
        assert code == 0
        A, S = load_matrix(out / "A.bin"), load_matrix(out / "S.bin")
        assert np.linalg.norm(A @ S - D) / np.linalg.norm(D) < 1e-2
        m = manifest(out)
        assert m["status"] == "feasible" and m["feasible"] and m["exit_code"] == 0

    def test_max_iter_one(self, tmp_path):
        data = scene(tmp_path, background_level=0.5) / "D.bin"
        code, out = unmix(tmp_path, data, K=3, background="true", lambda_tv=1,
                          height=8, width=8, max_iter=1)
        assert code == 2
        rows = trace(out)
        assert len(rows) == 4
        assert sorted((r["block"], r["constraint"]) for r in rows) == [
            ("0", "0"), ("1", "0"), ("1", "1"), ("1", "2")]
        assert manifest(out)["status"] == "max_iter"

    def test_manifest_defaults(self, rank_one_run):
        m = manifest(rank_one_run[1])
        assert m["config"]["eps_rel"] == 0.01
        assert m["config"]["eps_abs"] == 0.0
        for key in ("beta", "mu_policy", "seed", "prng", "iterations", "rho", "mu",
                    "init", "numpy_version"):
            assert key in m
        assert "lambda_tv" in m["config"]

    def test_deterministic(self, tmp_path):
        data = scene(tmp_path, background_level=0.5, noise_sigma=0.01) / "D.bin"
        kw = dict(K=3, background="true", lambda_tv=0.5, height=8, width=8, seed=3)
        codes = [unmix(tmp_path, data, name=n, **kw)[0] for n in ("a", "b")]
        assert codes[0] == codes[1]
        for f in ("A.bin", "S.bin", "trace.csv", "state/u_1_0.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_reproducible_from_manifest(self, tmp_path, rank_one_run):
        _, out, _ = rank_one_run
        m = manifest(out)
        values = dict(m["config"], out=str(tmp_path / "again"))
        assert cli.run_unmix(cli.RunConfig("unmix", values)) == 0
        assert (out / "trace.csv").read_bytes() == (tmp_path / "again" / "trace.csv").read_bytes()
        assert (out / "A.bin").read_bytes() == (tmp_path / "again" / "A.bin").read_bytes()

    def test_missing_data(self, tmp_path):
        assert unmix(tmp_path, tmp_path / "nope.bin", K=1)[0] == 4

    def test_missing_k(self, tmp_path, rank_one_run):
        assert run("unmix", "--set", f"data={tmp_path}/x.csv") == 4

    def test_unknown_key(self, tmp_path):
        assert run("gen-scene", "--set", f"out={tmp_path}", "--set", "bogus=1") == 4

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "scene.cfg"
        cfg.write_text(f"# small scene\nout = {tmp_path / 's'}\nB = 4\nH = 3\nW = 5\n")
        assert run("gen-scene", "--config", str(cfg), "--set", "W=2") == 0
        assert load_matrix(tmp_path / "s" / "D.bin").shape == (4, 6)


def quad_run(tmp_path, command, v, name="q", **kw):
    vpath = tmp_path / f"{name}_v.csv"
    save_matrix(vpath, np.asarray(v, dtype=float))
    out = tmp_path / name
    args = [command, "--set", f"v={vpath}", "--set", f"out={out}"]
    for k, val in kw.items():
        args += ["--set", f"{k}={val}"]
    return run(*args), out


class TestQuadratic:
    def test_admm_projection(self, tmp_path):
        code, out = quad_run(tmp_path, "solve-admm", [1, -2], eps_abs=1e-8,
                             eps_rel=1e-6)
        assert code == 0
        np.testing.assert_allclose(load_matrix(out / "x.bin").ravel(), [1, 0], atol=1e-4)

    def test_sdmm_duplicates(self, tmp_path):
        code, out = quad_run(tmp_path, "solve-sdmm", [1, -2], constraints="nonneg;nonneg",
                             eps_abs=1e-8, eps_rel=1e-6)
        assert code == 0
        np.testing.assert_allclose(load_matrix(out / "x.bin").ravel(), [1, 0], atol=1e-4)
        assert manifest(out)["beta"] == 2

    def test_dense_operator_file(self, tmp_path):
        save_matrix(tmp_path / "L.csv", np.array([[1.0, 1.0]]))
        code, out = quad_run(tmp_path, "solve-admm", [0.9, 0.8], constraints="ones",
                             operators=str(tmp_path / "L.csv"), eps_abs=1e-8,
                             eps_rel=1e-6)
        assert code == 0
        np.testing.assert_allclose(load_matrix(out / "x.bin").ravel(), [0.55, 0.45],
                                   atol=1e-4)

    def test_non_finite_exit_3(self, tmp_path):
        (tmp_path / "v.csv").write_text("1\nnan\n")
        out = tmp_path / "bad"
        assert run("solve-admm", "--set", f"v={tmp_path / 'v.csv'}",
                   "--set", f"out={out}") == 3
        assert manifest(out)["status"] == "diverged"

    def test_admm_needs_one_constraint(self, tmp_path):
        code, _ = quad_run(tmp_path, "solve-admm", [1, 2], constraints="nonneg;ones")
        assert code == 4

    def test_operator_dimension_mismatch(self, tmp_path):
        save_matrix(tmp_path / "L.csv", np.eye(3))
        code, _ = quad_run(tmp_path, "solve-admm", [1, 2],
                           operators=str(tmp_path / "L.csv"))
        assert code == 4


class TestCheck:
    def test_passes_after_exit_0(self, rank_one_run, capsys):
        assert run("check", "--set", f"run={rank_one_run[1]}") == 0
        out = capsys.readouterr().out
        assert "block 0 constraint 0 (ones): pass" in out
        assert "agrees" in out

    def test_corrupted_z_fails(self, tmp_path, rank_one_run, capsys):
        import shutil
        run_dir = tmp_path / "copy"
        shutil.copytree(rank_one_run[1], run_dir)
        zfile = run_dir / "state" / "z_0_0.bin"
        save_matrix(zfile, load_matrix(zfile) + 0.5)
        assert run("check", "--set", f"run={run_dir}") == 1
        out = capsys.readouterr().out
        assert "block 0 constraint 0 (ones): FAIL" in out
        assert "z outside set" in out

    def test_vacuous(self, tmp_path, capsys):
        code, out = quad_run(tmp_path, "solve-sdmm", [1, -2], constraints="",
                             eps_rel=1e-6)
        assert code == 0
        assert run("check", "--set", f"run={out}") == 0
        assert "vacuous pass" in capsys.readouterr().out

    def test_agrees_on_max_iter_run(self, tmp_path, capsys):
        code, out = quad_run(tmp_path, "solve-sdmm", [3, -1, 2],
                             constraints="nonneg;l1:0.5", max_iter=2)
        assert code == 2
        ok, _, verdict = cli.check_run(out)
        assert ok == verdict

    def test_missing_run(self, tmp_path):
        assert run("check", "--set", f"run={tmp_path / 'none'}") == 4

    def test_missing_state_file(self, tmp_path, rank_one_run):
        import shutil
        run_dir = tmp_path / "copy"
        shutil.copytree(rank_one_run[1], run_dir)
        os.remove(run_dir / "state" / "u_0_0.bin")
        assert run("check", "--set", f"run={run_dir}") == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "proxblock", "gen-scene",
                           "--set", f"out={tmp_path}", "--set", "B=2", "--set", "H=2",
                           "--set", "W=2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "D.bin").exists()


def test_threads_env_does_not_change_outputs(tmp_path, monkeypatch):
    data = scene(tmp_path, background_level=0.5) / "D.bin"
    kw = dict(K=3, background="true", lambda_tv=1, height=8, width=8, max_iter=50)
    monkeypatch.setenv("PROXBLOCK_THREADS", "1")
    unmix(tmp_path, data, name="t1", **kw)
    monkeypatch.setenv("PROXBLOCK_THREADS", "3")
    unmix(tmp_path, data, name="t3", **kw)
    for f in ("A.bin", "S.bin", "trace.csv"):
        assert (tmp_path / "t1" / f).read_bytes() == (tmp_path / "t3" / f).read_bytes()
