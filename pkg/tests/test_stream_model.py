import pytest
from hypothesis import given, strategies as st

from mkstream.stream_model import (
    FrameClass,
    GoPTemplate,
    KFramePattern,
    PatternLabel,
    build_gop_template,
    classify_gop,
    generate_stream,
)


@pytest.mark.parametrize(
    "nb_p,b,expected",
    [(3, 2, "IBBPBBPBBPBB"), (1, 0, "IP"), (4, 2, "IBBPBBPBBPBBPBB")],
)
def test_build_gop_template(nb_p, b, expected):
    assert str(build_gop_template(nb_p, b)) == expected


def test_classify_gop_maps_classes_to_labels():
    assert str(classify_gop(build_gop_template(3, 2))) == "MOOHOOHOOHOO"


def test_template_rejects_bad_layouts():
    with pytest.raises(ValueError):
        GoPTemplate.from_string("BIP")
    with pytest.raises(ValueError):
        GoPTemplate.from_string("IPIP")
    with pytest.raises(ValueError):
        build_gop_template(0, 2)


def test_from_string_round_trip():
    t = GoPTemplate.from_string("ibbpbbpbbpbb")
    assert t == build_gop_template(3, 2)
    assert KFramePattern.from_string("MOOH").positions(PatternLabel.O) == [1, 2]


@given(st.integers(1, 9), st.integers(0, 4))
def test_template_counts(nb_p, b):
    t = build_gop_template(nb_p, b)
    assert len(t) == 1 + nb_p * (b + 1) + b
    assert t.frames.count(FrameClass.P) == nb_p
    pattern = classify_gop(t)
    assert len(pattern.positions(PatternLabel.M)) == 1
    assert len(pattern.positions(PatternLabel.O)) == (nb_p + 1) * b


def test_generate_stream_spacing():
    frames = generate_stream("v1", 1, GoPTemplate.from_string("IP"), 2.0)
    assert [f.release_time for f in frames] == [0.0, 0.5]


def test_generate_stream_repeats_gop():
    frames = generate_stream("v1", 2, build_gop_template(3, 2), 30.0)
    assert len(frames) == 24
    assert frames[12].frame_class is FrameClass.I and frames[12].label is PatternLabel.M
    assert frames[3].frame_class is FrameClass.P and frames[3].label is PatternLabel.H


def test_generate_stream_deadlines():
    frames = generate_stream("v", 1, build_gop_template(3, 2), 30.0, start_time=4.0, slack_multiplier=5.0)
    for f in frames:
        assert f.deadline == pytest.approx(f.release_time + 5 / 30)
    assert frames[0].release_time == 4.0
    with pytest.raises(ValueError):
        generate_stream("v", 1, build_gop_template(3, 2), 0.0)
