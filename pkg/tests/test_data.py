import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import OneHotEncoder

from hmdn.data import (SyntheticConfig, decode_ids, generate_synthetic, load_csv, load_schema,
                       partition_report, save_schema, write_csv)
from hmdn.embedding import ExampleBatch, Feature, FeatureSchema
from hmdn.exceptions import ConfigError, IngestionError

CSV_SCHEMA = FeatureSchema((Feature("city", 3, 2, True, "city"), Feature("device", 4, 2)))


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_coin_flip_rate():
    cfg = SyntheticConfig(n_examples=20000, test_size=0, base_logit=0.0, level_effect_scales=[0, 0, 0],
                          interaction_scale=0, feature_effect_scale=0, partition_feature_scale=0,
                          label_noise=0)
    _, train, _ = generate_synthetic(cfg)
    sigma = np.sqrt(0.25 / len(train))
    assert abs(train.labels.mean() - 0.5) <= 3 * sigma


def test_determinism():
    cfg = SyntheticConfig(n_examples=3000, test_size=500, seed=9)
    a = generate_synthetic(cfg)
    b = generate_synthetic(SyntheticConfig(n_examples=3000, test_size=500, seed=9))
    for x, y in zip(a[1:], b[1:]):
        assert x.labels.tobytes() == y.labels.tobytes()
        assert all(x.ids[k].tobytes() == y.ids[k].tobytes() for k in x.ids)
    other = generate_synthetic(SyntheticConfig(n_examples=3000, test_size=500, seed=10))
    assert other[1].labels.tobytes() != a[1].labels.tobytes()


def test_split_sizes_and_schema():
    schema, train, test = generate_synthetic(SyntheticConfig(n_examples=1000, test_size=200))
    assert len(train) == 800 and len(test) == 200
    assert [f.name for f in schema.distribution_features] == ["domain_id", "is_new_user", "ad_source"]
    assert len(schema.features) == 8
    train.validate(schema)
    test.validate(schema)
    assert all(train.ids[f.name].min() >= 1 for f in schema.features)


@pytest.mark.parametrize("bad", [
    dict(distribution_types=[("a", 3)], level_effect_scales=[1.0]),
    dict(distribution_types=[("a", 1), ("b", 2)], level_effect_scales=[1.0, 1.0]),
    dict(interaction_scale=-1.0),
    dict(test_size=10, n_examples=5),
    dict(level_effect_scales=[1.0]),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(**bad))


def test_planted_effect_signs_recovered():
    # interactions and partition-dependent feature effects are switched off so
    # the one-hot model is well specified for the type effects
    cfg = SyntheticConfig(interaction_scale=0.0, partition_feature_scale=0.0)
    schema, train, _, eff = generate_synthetic(cfg, return_effects=True)
    names = [f.name for f in schema.distribution_features]
    enc = OneHotEncoder(sparse_output=False)
    X = enc.fit_transform(np.column_stack([train.ids[n] for n in names]))
    lr = LogisticRegression(C=1e4, max_iter=2000).fit(X, train.labels)
    coefs = np.split(lr.coef_[0], np.cumsum([len(c) for c in enc.categories_])[:-1])
    checked = 0
    for c, e, scale in zip(coefs, eff["type_effects"], cfg.level_effect_scales):
        assert scale >= 1.0
        c, e = c - c.mean(), e - e.mean()
        clear = np.abs(e) > 0.1
        np.testing.assert_array_equal(np.sign(c[clear]), np.sign(e[clear]))
        checked += int(clear.sum())
    assert checked >= 5


def test_csv_first_seen_encoding(tmp_path):
    p = _write(tmp_path, "a.csv", "city,device,label\nparis,ios,1\nrome,ios,0\n")
    batch, dicts = load_csv(CSV_SCHEMA, p)
    np.testing.assert_array_equal(batch.ids["city"], [1, 2])
    np.testing.assert_array_equal(batch.ids["device"], [1, 1])
    np.testing.assert_array_equal(batch.labels, [1, 0])
    assert dicts["city"] == {"paris": 1, "rome": 2}


def test_csv_oov_and_round_trip(tmp_path):
    train = _write(tmp_path, "t.csv", "label,device,city\n0,android,oslo\n1,ios,rome\n1,web,oslo\n")
    test = _write(tmp_path, "v.csv", "city,device,label\nlima,ios,0\nrome,tv,1\n")
    batch, dicts = load_csv(CSV_SCHEMA, train)
    assert decode_ids(dicts, "city", batch.ids["city"]) == ["oslo", "rome", "oslo"]
    assert decode_ids(dicts, "device", batch.ids["device"]) == ["android", "ios", "web"]
    held, _ = load_csv(CSV_SCHEMA, test, dicts)
    np.testing.assert_array_equal(held.ids["city"], [0, 2])
    np.testing.assert_array_equal(held.ids["device"], [2, 0])


def test_csv_errors(tmp_path):
    with pytest.raises(IngestionError, match="'device'"):
        load_csv(CSV_SCHEMA, _write(tmp_path, "a.csv", "city,label\nx,1\n"))
    with pytest.raises(IngestionError, match="line 3"):
        load_csv(CSV_SCHEMA, _write(tmp_path, "b.csv", "city,device,label\nx,y,1\nx,y,2\n"))
    with pytest.raises(IngestionError, match="empty"):
        load_csv(CSV_SCHEMA, _write(tmp_path, "c.csv", ""))
    with pytest.raises(IngestionError, match="more than 3"):
        load_csv(CSV_SCHEMA, _write(tmp_path, "d.csv", "city,device,label\na,x,1\nb,x,1\nc,x,0\nd,x,1\n"))


def test_write_then_load_synthetic(tmp_path):
    schema, train, _ = generate_synthetic(SyntheticConfig(n_examples=300, test_size=0))
    path = tmp_path / "train.csv"
    write_csv(schema, train, path)
    loaded, dicts = load_csv(schema, path)
    for f in schema.features:
        decoded = decode_ids(dicts, f.name, loaded.ids[f.name])
        assert decoded == [str(v - 1) for v in train.ids[f.name]]
    np.testing.assert_array_equal(loaded.labels, train.labels)


def test_schema_file_round_trip(tmp_path):
    schema = SyntheticConfig().schema()
    save_schema(schema, tmp_path / "schema.json")
    assert load_schema(tmp_path / "schema.json") == schema


def test_partition_report_default_layout():
    schema, train, _ = generate_synthetic(SyntheticConfig(n_examples=20000, test_size=0))
    report = partition_report(train, schema)
    assert len(report) <= 12
    assert sum(report.values()) == len(train)
    n, p = len(train), 1.0 / 12
    bound = 4 * np.sqrt(n * p * (1 - p))
    assert len(report) == 12
    assert all(abs(c - n * p) <= bound for c in report.values())


def test_partition_report_single_example():
    schema = SyntheticConfig().schema()
    batch = ExampleBatch({f.name: [1] for f in schema.features}, [1])
    assert partition_report(batch, schema) == {(1, 1, 1): 1}
