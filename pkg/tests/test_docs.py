import dataclasses
import json
from pathlib import Path

from otgcd.data import SyntheticSpec
from otgcd.trainer import TrainConfig

DOCS = Path(__file__).resolve().parent.parent / "docs"


def schema(name):
    return json.loads((DOCS / name).read_text())


def defaults(cls):
    return {f.name: f.default for f in dataclasses.fields(cls)}


def test_train_schema_matches_config():
    props = schema("train_config.schema.json")["properties"]
    assert {k: v["default"] for k, v in props.items()} == defaults(TrainConfig)


def test_spec_schema_matches_generator():
    props = schema("experiment_config.schema.json")["$defs"]["spec"]["properties"]
    expected = {**defaults(SyntheticSpec), "profile": SyntheticSpec().profile.value}
    assert {k: v["default"] for k, v in props.items()} == expected
