import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odapipe import transport as tp
from odapipe.transport import (Ack, Batch, Bye, Hello, Knob, Ping, ProtocolError,
                               Publish, Subscribe, SubscriptionPattern,
                               batch_from_arrays, decode_frame, encode_frame,
                               iter_batch_arrays, parse_pattern)

TOPIC = st.from_regex(r"/[a-z0-9\-]{1,8}(/[a-z0-9\-]{1,8}){1,4}", fullmatch=True)


def ascending_runs():
    def build(topic, stamps, values):
        stamps = sorted(set(stamps))
        return topic, tuple(zip(stamps, values[: len(stamps)]))

    return st.builds(
        build, TOPIC,
        st.lists(st.integers(1, 2**40), min_size=1, max_size=10),
        st.lists(st.integers(-(2**40), 2**40), min_size=10, max_size=10),
    )


FRAMES = st.one_of(
    st.builds(Hello, node=st.text(max_size=20)),
    st.builds(Publish, topic=TOPIC, timestamp=st.integers(1, 2**63 - 1),
              value=st.integers(-(2**62), 2**62)),
    st.builds(Subscribe, pattern=TOPIC, from_ts=st.integers(0, 2**62),
              to_ts=st.integers(0, 2**62), mode=st.sampled_from([0, 1, 2])),
    st.builds(lambda runs: Batch(runs=tuple(runs)),
              st.lists(ascending_runs(), max_size=4)),
    st.just(Ping()),
    st.just(Bye()),
    st.builds(Knob, topic=TOPIC, value=st.integers(-(2**62), 2**62)),
    st.builds(Ack, of_kind=st.sampled_from(list(tp.KIND_NAMES)),
              status=st.integers(0, 255), count=st.integers(0, 2**31)),
)


class TestCodec:
    def test_ping_roundtrip_is_8_bytes(self):
        raw = encode_frame(Ping())
        assert len(raw) == 8
        assert decode_frame(raw) == Ping()

    def test_batch_roundtrip(self):
        b = Batch(runs=(("/a/b/s", ((1, 10), (2, 20), (3, 30))),))
        assert decode_frame(encode_frame(b)) == b

    def test_truncated_frame_errors(self):
        raw = encode_frame(Batch(runs=(("/a/b/s", ((1, 10),)),)))
        with pytest.raises(ProtocolError, match="unexpected end"):
            decode_frame(raw[:-1])

    def test_bad_magic(self):
        raw = bytearray(encode_frame(Ping()))
        raw[0] ^= 0xFF
        with pytest.raises(ProtocolError, match="bad magic"):
            decode_frame(bytes(raw))

    def test_unknown_kind(self):
        raw = bytearray(encode_frame(Ping()))
        raw[2] = 99
        with pytest.raises(ProtocolError, match="unknown frame kind"):
            decode_frame(bytes(raw))

    def test_trailing_bytes_rejected(self):
        raw = encode_frame(Ping()) + b"x"
        with pytest.raises(ProtocolError, match="length mismatch"):
            decode_frame(raw)

    def test_oversized_frame_rejected(self):
        run = ("/a/b/s", tuple((i + 1, 0) for i in range(70_000)))
        with pytest.raises(ProtocolError, match="1 MiB"):
            encode_frame(Batch(runs=(run,)))

    def test_non_ascending_batch_rejected_on_encode(self):
        with pytest.raises(ProtocolError, match="not ascending"):
            encode_frame(Batch(runs=(("/a/b/s", ((5, 1), (5, 2))),)))

    @given(FRAMES)
    @settings(max_examples=200)
    def test_roundtrip_identity(self, frame):
        assert decode_frame(encode_frame(frame)) == frame

    @given(st.binary(max_size=200))
    @settings(max_examples=300)
    def test_fuzz_never_crashes(self, junk):
        try:
            decode_frame(junk)
        except ProtocolError:
            pass

    @given(FRAMES, st.data())
    @settings(max_examples=150)
    def test_fuzz_mutated_valid_frames(self, frame, data):
        raw = bytearray(encode_frame(frame))
        idx = data.draw(st.integers(0, len(raw) - 1))
        raw[idx] ^= data.draw(st.integers(1, 255))
        try:
            decode_frame(bytes(raw))
        except ProtocolError:
            pass

    def test_batch_array_fast_path_matches_decode(self):
        b = Batch(runs=(("/a/b/s", ((1, 10), (5, -20))), ("/a/b/t", ((2, 7),))))
        raw = encode_frame(b)
        runs = [(t, list(ts), list(vs)) for t, ts, vs in iter_batch_arrays(raw[8:])]
        assert runs == [("/a/b/s", [1, 5], [10, -20]), ("/a/b/t", [2], [7])]

    def test_batch_from_arrays_roundtrip(self):
        raw = batch_from_arrays([("/a/b/s", np.array([1, 2, 9]), np.array([5, -5, 0]))])
        assert decode_frame(raw) == Batch(runs=(("/a/b/s", ((1, 5), (2, -5), (9, 0))),))


class TestPattern:
    def test_wildcard_prefix_match(self):
        p = parse_pattern("/deepest/cm/#")
        assert p.matches("/deepest/cm/n03/cpu0/temp-p")
        assert not p.matches("/deepest/esb/n1/gpu0/temp")

    def test_exact_match_without_wildcard(self):
        p = parse_pattern("/a/b/c")
        assert p.matches("/a/b/c")
        assert not p.matches("/a/b/c/d")
        assert not p.matches("/a/b")

    def test_wildcard_matches_prefix_itself_children_only(self):
        p = parse_pattern("/a/b/#")
        assert p.matches("/a/b")  # prefix labels equal
        assert p.matches("/a/b/c")

    def test_hash_only_at_end(self):
        with pytest.raises(ProtocolError):
            parse_pattern("/a/#/b")

    def test_pattern_text_roundtrip(self):
        assert str(parse_pattern("/a/b/#")) == "/a/b/#"
        assert str(parse_pattern("/a/b")) == "/a/b"
