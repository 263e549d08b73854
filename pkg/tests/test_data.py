import json

import numpy as np
import pytest

from conftest import DATASET_FIXTURE
from modules.data import (
    ARCHETYPES,
    FORMAT_VERSION,
    PRESETS,
    Dataset,
    GenSpec,
    generate,
    load,
    preset_spec,
    save,
    split,
    split_indices,
)
from modules.encoders import FAKE, REAL
from modules.errors import ConfigError, DatasetError, ParseError, SchemaError

SMALL = GenSpec(n_samples=12, d_raw=4, k_img=2, k_txt=2, n_topics=3, seed=5)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_class_balance_is_exact():
    dataset = generate(GenSpec(n_samples=1000, fake_fraction=0.5, d_raw=8, k_img=2, k_txt=2, seed=1))
    assert dataset.class_counts() == {REAL: 500, FAKE: 500}
    kinds = dataset.kinds
    assert sum(kinds.count(a) for a in ARCHETYPES) == 500
    assert all(kinds.count(a) == 125 for a in ARCHETYPES)


def test_unrelated_fakes_disagree_across_modalities():
    spec = GenSpec(n_samples=40, archetype_mix=(0, 0, 1, 0), noise_sigma=0.0, d_raw=6, k_img=3, k_txt=3,
                   n_topics=4, seed=2)
    dataset = generate(spec)
    real = [_cos(s.image_tokens.mean(axis=0), s.text_tokens.mean(axis=0)) for s in dataset if s.label == REAL]
    fake = [_cos(s.image_tokens.mean(axis=0), s.text_tokens.mean(axis=0)) for s in dataset if s.label == FAKE]
    assert max(fake) < min(real)
    np.testing.assert_allclose(real, 1.0, atol=1e-12)


def test_generation_is_deterministic(tmp_path):
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert save(generate(SMALL), str(first)) == save(generate(SMALL), str(second))
    assert first.read_bytes() == second.read_bytes()
    assert generate(SMALL).checksum() != generate(GenSpec(**{**SMALL.to_dict(), 'seed': 6})).checksum()


def test_save_and_load(tmp_path):
    original = generate(SMALL)
    path = tmp_path / "data.jsonl"
    save(original, str(path))
    header = json.loads(path.read_text().splitlines()[0])
    assert header['format'] == FORMAT_VERSION
    assert header['n_samples'] == 12
    loaded = load(str(path))
    assert len(loaded) == len(original)
    assert loaded.labels.tolist() == original.labels.tolist()
    assert loaded.kinds == original.kinds
    assert np.array_equal(loaded[3].image_tokens, original[3].image_tokens)
    assert loaded.checksum() == original.checksum()


def test_fixture_file_round_trips_to_its_checksum(tmp_path, golden_checksum):
    dataset = load(DATASET_FIXTURE)
    assert dataset.labels.tolist() == [REAL, FAKE, REAL, FAKE]
    out = tmp_path / "copy.jsonl"
    golden_checksum("dataset_fixture", save(dataset, str(out)))
    with open(DATASET_FIXTURE, 'rb') as f:
        assert out.read_bytes() == f.read()


def _write(tmp_path, lines):
    path = tmp_path / "data.jsonl"
    path.write_text('\n'.join(lines) + '\n')
    return str(path)


def _lines():
    return generate(SMALL).to_lines()


def test_truncated_file(tmp_path):
    lines = _lines()
    with pytest.raises(ParseError) as info:
        load(_write(tmp_path, lines[:5]))
    assert info.value.line_number == 6


def test_cut_mid_record(tmp_path):
    lines = _lines()
    lines[4] = lines[4][:20]
    with pytest.raises(ParseError) as info:
        load(_write(tmp_path, lines[:5]))
    assert info.value.line_number == 5
    assert str(info.value).startswith("line 5: ")


def test_record_that_is_not_an_object(tmp_path):
    lines = _lines()
    lines[2] = '[1, 2]'
    with pytest.raises(ParseError) as info:
        load(_write(tmp_path, lines))
    assert info.value.line_number == 3


def _replace(lines, index, **changes):
    record = json.loads(lines[index])
    record.update(changes)
    lines[index] = json.dumps(record)
    return lines


def test_wrong_token_width(tmp_path):
    lines = _replace(_lines(), 1, img=[[0.0] * 5, [0.0] * 5])
    with pytest.raises(SchemaError):
        load(_write(tmp_path, lines))


def test_unknown_format_version(tmp_path):
    lines = _lines()
    header = json.loads(lines[0])
    header['format'] = 'cromekit-ds-0'
    lines[0] = json.dumps(header)
    with pytest.raises(SchemaError):
        load(_write(tmp_path, lines))


@pytest.mark.parametrize("changes", [dict(label=2), dict(kind='e'), dict(id='s000000')])
def test_schema_violations(tmp_path, changes):
    lines = _replace(_lines(), 2, **changes)
    with pytest.raises(SchemaError):
        load(_write(tmp_path, lines))


def test_missing_field(tmp_path):
    lines = _lines()
    record = json.loads(lines[1])
    del record['txt']
    lines[1] = json.dumps(record)
    with pytest.raises(ParseError):
        load(_write(tmp_path, lines))


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load(str(tmp_path / "absent.jsonl"))
    with pytest.raises(ParseError):
        load(_write(tmp_path, ['']))


def test_split_sizes():
    dataset = generate(GenSpec(n_samples=10, d_raw=4, k_img=2, k_txt=2, n_topics=2, seed=0))
    train, test = split(dataset, 0.8, seed=0)
    assert (len(train), len(test)) == (8, 2)
    assert train.class_counts() == {REAL: 4, FAKE: 4}
    assert test.class_counts() == {REAL: 1, FAKE: 1}


@pytest.mark.parametrize("seed", range(100))
def test_split_is_a_partition(seed, tiny_dataset):
    train, test = split_indices(tiny_dataset, 0.75, seed)
    assert not set(train.tolist()) & set(test.tolist())
    assert sorted(train.tolist() + test.tolist()) == list(range(len(tiny_dataset)))


def test_split_validation(tiny_dataset):
    with pytest.raises(ConfigError):
        split(tiny_dataset, 1.0)


def test_presets():
    spec = preset_spec('politifact')
    assert spec.n_samples == PRESETS['politifact'][0]
    assert spec.fake_fraction == pytest.approx(320 / 485)
    assert preset_spec('weibo', scale=0.1).n_samples == 782
    assert preset_spec('weibo21', n_samples=50).n_samples == 50
    with pytest.raises(ConfigError):
        preset_spec('twitter')
    with pytest.raises(ConfigError):
        preset_spec('weibo', scale=0)


@pytest.mark.parametrize("kwargs", [
    dict(n_samples=1), dict(fake_fraction=1.0), dict(archetype_mix=(0.5, 0.5)),
    dict(archetype_mix=(0.5, 0.5, 0.5, -0.5)), dict(n_topics=20), dict(noise_sigma=-1.0), dict(seed=-1),
])
def test_gen_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        GenSpec(**kwargs)


def test_dataset_rejects_mismatched_samples():
    sample = generate(SMALL)[0]
    with pytest.raises(SchemaError):
        Dataset([sample], d_raw=5, k_img=2, k_txt=2)
