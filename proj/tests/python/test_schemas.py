import json
from pathlib import Path

import jsonschema
import pytest
from referencing import Registry, Resource

import tdid

SCHEMAS = Path(__file__).resolve().parents[2] / "schemas"


@pytest.fixture(scope="module")
def validate():
    registry = Registry()
    schemas = {}
    for p in SCHEMAS.glob("*.schema.json"):
        s = json.loads(p.read_text())
        jsonschema.Draft202012Validator.check_schema(s)
        schemas[p.name.removesuffix(".schema.json")] = s
        registry = registry.with_resource(s["$id"], Resource.from_contents(s))

    def check(name, doc):
        jsonschema.Draft202012Validator(schemas[name], registry=registry).validate(doc)

    return check


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("schemas")
    ds = root / "ds"
    out = {}

    def cli(*args):
        code, stdout, err = tdid.run_cli([str(a) for a in args])
        assert code == 0, err
        return stdout

    out["gen"] = cli("gen-data", "--out", ds, "--seed", 5, "--num-instances", 3, "--num-scenes", 10,
                     "--image-size", 64, "--num-holdout", 1)
    config = root / "run.json"
    config.write_text(json.dumps({
        "model": {"backbone_channels": [8, 16, 16], "backbone_stride": 4, "feature_dim": 16},
        "train": {"iterations": 4, "log_every": 2, "lr": 0.01},
    }))
    ckpt = root / "m.ckpt"
    out["train"] = cli("train", "--dataset", ds, "--config", config, "--out", ckpt)
    cli("eval", "--dataset", ds, "--checkpoint", ckpt, "--buckets", "all,large,quartiles", "--out", root / "eval.json")
    out["detect"] = cli("detect", "--checkpoint", ckpt, "--scene", ds / "scenes" / "000000.ppm", "--target-id", "inst00")
    cli("ablate", "--dataset", ds, "--config", config, "--iters", 1, "--out", root / "ablation.json")
    out["root"] = root
    return out


def load(path):
    return json.loads(Path(path).read_text())


def test_manifest(run, validate):
    validate("manifest", load(run["root"] / "ds" / "manifest.json"))
    validate("gen_data_summary", json.loads(run["gen"]))


def test_training_outputs(run, validate):
    lines = [json.loads(l) for l in run["train"].splitlines()]
    assert lines[-1]["event"] == "checkpoint"
    for line in lines:
        validate("train_log", line)
    validate("model_config", load(run["root"] / "m.json"))
    validate("run_config", load(run["root"] / "m.run.json"))


def test_eval_detect_ablate(run, validate):
    validate("eval_result", load(run["root"] / "eval.json"))
    validate("detections", json.loads(run["detect"]))
    validate("ablation", load(run["root"] / "ablation.json"))


def test_schemas_reject_malformed(validate):
    with pytest.raises(jsonschema.ValidationError):
        validate("detections", {"scene": "s", "target_id": "a", "detections": [{"box": [0, 0, 1], "score": 0.5,
                                                                               "target_id": "a"}]})
    with pytest.raises(jsonschema.ValidationError):
        validate("model_config", {"backbone_channels": [8]})
