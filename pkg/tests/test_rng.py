import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ubmcmc.rng import (
    STREAM_TAGS,
    SeedSpec,
    derive_stream,
    replicate_streams,
    sample_std_normal_vec,
)


def test_same_spec_reproduces_stream():
    a = derive_stream(SeedSpec(11, 4, "chain"))
    b = derive_stream(SeedSpec(11, 4, "chain"))
    assert_array_equal(a.standard_normal(10), b.standard_normal(10))


def test_tags_give_distinct_streams():
    draws = {}
    for tag in STREAM_TAGS:
        draws[tag] = derive_stream(SeedSpec(11, 4, tag)).standard_normal(6)
    tags = list(STREAM_TAGS)
    for i, t1 in enumerate(tags):
        for t2 in tags[i + 1 :]:
            assert not np.allclose(draws[t1], draws[t2])


def test_replicates_give_distinct_streams():
    a = derive_stream(SeedSpec(11, 0, "chain")).standard_normal(6)
    b = derive_stream(SeedSpec(11, 1, "chain")).standard_normal(6)
    assert not np.allclose(a, b)


def test_replicate_streams_bundle_matches_singletons():
    bundle = replicate_streams(7, 3)
    for tag in STREAM_TAGS:
        attr = tag.replace("-", "_")
        got = getattr(bundle, attr).standard_normal(4)
        want = derive_stream(SeedSpec(7, 3, tag)).standard_normal(4)
        assert_array_equal(got, want)


def test_sample_std_normal_vec_shape_and_determinism():
    s1 = derive_stream(SeedSpec(5, 0, "init"))
    s2 = derive_stream(SeedSpec(5, 0, "init"))
    v1 = sample_std_normal_vec(s1, 3)
    v2 = sample_std_normal_vec(s2, 3)
    assert v1.shape == (3,)
    assert_array_equal(v1, v2)


@pytest.mark.parametrize(
    "root,rep,tag",
    [
        (-1, 0, "chain"),
        (0, -2, "chain"),
        (0, 0, "not-a-tag"),
    ],
)
def test_seed_spec_rejects_bad_fields(root, rep, tag):
    with pytest.raises(ValueError):
        SeedSpec(root, rep, tag)
