import json
from pathlib import Path

import numpy as np
import pytest

from spectralx import cli, config
from spectralx.config import ConfigError

FAST = ["data.n_train=4", "data.n_test=2"]


def run(argv, capsys=None):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(root), *FAST]) == 0
    return root


def tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_sections_and_overrides(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("# comment\n[run]\nseed = 3\nepochs2 = 5\nscene.sites = 6\n")
        cfg = config.load(str(f), ["run.seed=7", "ablate.seeds=0,1"])
        assert cfg.run.seed == 7 and cfg.run.epochs2 == 5 and cfg.scene.sites == 6
        assert cfg.ablate.seeds == (0, 1)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            config.load(None, ["run.bogus=1"])
        with pytest.raises(ConfigError):
            config.load(None, ["nosection=1"])

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            config.load(None, ["run.epochs1=many"])
        with pytest.raises(ConfigError):
            config.load(None, ["run.hypert=false"])   # are/aomoa still on

    def test_env_seed(self):
        assert config.load(None, [], seed=9).run.seed == 9
        assert config.load(None, ["run.seed=2"], seed=9).run.seed == 2

    def test_dump_round_trip(self):
        cfg = config.load(None, ["run.lr2=0.01", "shift.kind=regional"])
        again = config.apply(config.Config(), config.parse_lines(config.dump(cfg).splitlines()))
        assert again == cfg


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["train", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_verb(self, capsys):
        assert run(["dance"]) == 1

    def test_config_error(self, tmp_path):
        assert run(["gen", "--out", tmp_path, "run.nope=1"]) == 2
        assert run(["gen", "--out", tmp_path, "--config", tmp_path / "missing.txt"]) == 2

    def test_env_seed_error(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPECTRALX_SEED", "abc")
        assert run(["gen", "--out", tmp_path, *FAST]) == 2

    def test_data_error(self, tmp_path):
        assert run(["train", "--data", tmp_path / "none", "--out", tmp_path]) == 3

    def test_numeric_error(self, data, tmp_path):
        assert run(["train", "--data", data, "--out", tmp_path, "run.stage1_enabled=false",
                    "run.epochs2=3", "run.lr2=1e30"]) == 4


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen", "--out", a, *FAST]) == 0
    assert run(["gen", "--out", b, *FAST]) == 0
    assert tree(a) == tree(b)
    assert run(["gen", "--out", a, *FAST]) == 0
    assert tree(a) == tree(b)


def test_pipeline_verbs(data, tmp_path, capsys):
    s1, s2, inf, ev = (tmp_path / n for n in ("s1", "s2", "inf", "ev"))
    assert run(["adapt", "--data", data, "--out", s1, "run.epochs1=1"]) == 0
    assert run(["train", "--data", data, "--out", s2, "--stage1", s1 / "stage1.spxw",
                "run.epochs1=1", "run.epochs2=1"]) == 0
    assert run(["infer", "--data", data, "--weights", s2 / "stage2.spxw", "--out", inf]) == 0
    maps = sorted((inf / "maps").glob("*.pgm"))
    assert len(maps) == 2 and len(list((inf / "maps").glob("*.ppm"))) == 2
    ppm = (inf / "maps" / "0000.ppm").read_bytes()
    assert ppm.startswith(b"P6\n32 32\n255\n") and len(ppm) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3
    assert run(["eval", "--data", data, "--maps", inf / "maps", "--out", ev]) == 0
    infer_manifest = json.loads(next(inf.glob("run-*.json")).read_text())
    text = (ev / "metrics.txt").read_text()
    assert f"miou={infer_manifest['metrics']['target']['miou']:.6f}" in text
    capsys.readouterr()
    assert run(["report", "--out", tmp_path / "rep", "--dirs", s1, s2, inf]) == 0
    lines = (tmp_path / "rep" / "report.txt").read_text().splitlines()
    assert len(lines) == 4
    hashes = [l.split()[0] for l in lines[1:]]
    assert hashes == sorted(hashes)


def test_pgm_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 5, (7, 9))
    cli.write_pgm(tmp_path / "a.pgm", lab)
    assert np.array_equal(cli.read_pgm(tmp_path / "a.pgm"), lab)


def test_palette():
    assert cli.PALETTE.shape == (24, 3) and len({tuple(c) for c in cli.PALETTE}) == 24


def test_ablate_emits_eight_manifests(data, tmp_path):
    out = tmp_path / "abl"
    assert run(["ablate", "--data", data, "--out", out, "run.epochs1=1", "run.epochs2=1", "ablate.seeds=0"]) == 0
    manifests = [json.loads(p.read_text()) for p in out.glob("run-*.json")]
    assert len(manifests) == 8
    cells = {(m["row"], m["stage1"]) for m in manifests}
    assert len(cells) == 8
