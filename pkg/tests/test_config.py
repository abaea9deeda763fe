import json

import pytest

from pointsup.config import RunConfig
from pointsup.errors import ParameterError


class TestRunConfig:
    def test_defaults_valid(self):
        cfg = RunConfig()
        assert cfg.phase1_iters == 400
        assert (cfg.k1, cfg.k2, cfg.k3, cfg.beta, cfg.r) == (5, 3, 1, 0.25, 0.2)

    @pytest.mark.parametrize(
        "field,value",
        [("m", 1.5), ("beta", -0.1), ("k2", 9), ("ema_momentum", 1.0), ("r", 1.0), ("eval_iou", 0.0), ("scorer", "mlp")],
    )
    def test_error_names_field(self, field, value):
        with pytest.raises(ParameterError, match=f"'{field}'"):
            RunConfig(**{field: value})

    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(seed=3, m=0.3)
        path = tmp_path / "c.json"
        path.write_text(cfg.dumps())
        assert RunConfig.load(path) == cfg

    def test_unknown_field(self):
        with pytest.raises(ParameterError, match="bogus"):
            RunConfig.from_dict({"bogus": 1})

    def test_overrides(self):
        cfg = RunConfig().with_overrides(["m=0.6", "mask_scale=[4, 16]", "scorer=linear"])
        assert cfg.m == 0.6 and cfg.mask_scale == [4, 16] and cfg.scorer == "linear"
        with pytest.raises(ParameterError):
            RunConfig().with_overrides(["m"])
        with pytest.raises(ParameterError):
            RunConfig().with_overrides(["nope=1"])

    def test_dumps_sorted(self):
        keys = list(json.loads(RunConfig().dumps()))
        assert keys == sorted(keys)
