import numpy as np
import pytest

from vflsurv.federation.messages import (
    ControlMessage, DecodeError, EmbeddingMessage, GradientMessage,
    MAGIC, TYPE_CONTROL, TYPE_EMBEDDING, TYPE_GRADIENT, TYPE_KL,
    decode_frame, decode_message, encode_frame, encode_message,
)


def random_embedding_message(rng, cols=16):
    n = int(rng.integers(1, 9))
    rows = rng.standard_normal((n, cols)).astype(np.float32).astype(np.float64)
    return EmbeddingMessage(
        round=int(rng.integers(0, 2 ** 31)),
        client=int(rng.integers(0, 64)),
        subjects=tuple(int(s) for s in rng.integers(0, 2 ** 40, size=n)),
        rows=rows,
        kl=float(np.float32(rng.standard_normal())),
    )


def random_gradient_message(rng, cols=16):
    n = int(rng.integers(1, 9))
    rows = rng.standard_normal((n, cols)).astype(np.float32).astype(np.float64)
    return GradientMessage(
        round=int(rng.integers(0, 2 ** 31)),
        client=int(rng.integers(0, 64)),
        subjects=tuple(int(s) for s in rng.integers(0, 2 ** 40, size=n)),
        rows=rows,
    )


def random_control_message(rng):
    digest = "".join(rng.choice(list("0123456789abcdef"), size=32))
    kind = ["start", "stop", "ack"][int(rng.integers(0, 3))]
    return ControlMessage(kind=kind, client=int(rng.integers(0, 8)),
                          round=int(rng.integers(0, 1000)), digest=digest)


class TestFrameLayout:
    def test_embedding_header_bytes(self):
        msg = EmbeddingMessage(round=7, client=2, subjects=(11,),
                               rows=np.ones((1, 4)), kl=0.5)
        raw = encode_message(msg)
        assert raw[:4] == b"BVFM"
        assert raw[4] == 1              # version
        assert raw[5] == TYPE_EMBEDDING  # 0x01
        assert int.from_bytes(raw[6:10], "little") == 7
        assert int.from_bytes(raw[10:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 1   # subject count
        assert int.from_bytes(raw[16:24], "little") == 11  # subject id

    def test_type_codes(self):
        assert TYPE_EMBEDDING == 0x01
        assert TYPE_GRADIENT == 0x02
        assert TYPE_CONTROL == 0x03
        assert TYPE_KL == 0x04

    def test_payload_is_f32_le(self):
        frame_bytes = encode_frame(TYPE_GRADIENT, 0, 0, (5,),
                                   np.array([[1.5, -2.0]]))
        frame, _ = decode_frame(frame_bytes)
        assert frame.payload.dtype == np.float32
        np.testing.assert_array_equal(frame.payload, [[1.5, -2.0]])


class TestRoundTrips:
    def test_randomized_messages_byte_identical(self):
        rng = np.random.default_rng(99)
        for i in range(500):
            kind = i % 3
            if kind == 0:
                msg = random_embedding_message(rng)
            elif kind == 1:
                msg = random_gradient_message(rng)
            else:
                msg = random_control_message(rng)
            raw = encode_message(msg)
            back = decode_message(raw)
            assert encode_message(back) == raw
            assert back.round == msg.round and back.client == msg.client
            if not isinstance(msg, ControlMessage):
                assert back.subjects == msg.subjects
                np.testing.assert_array_equal(back.rows, msg.rows)
            else:
                assert back.kind == msg.kind and back.digest == msg.digest

    def test_embedding_kl_survives(self):
        msg = EmbeddingMessage(round=1, client=0, subjects=(1, 2),
                               rows=np.zeros((2, 3)), kl=float(np.float32(3.25)))
        back = decode_message(encode_message(msg))
        assert back.kl == 3.25


class TestCorruption:
    def _embedding_bytes(self):
        msg = EmbeddingMessage(round=3, client=1, subjects=(4, 5),
                               rows=np.ones((2, 6)), kl=1.0)
        return encode_message(msg)

    def test_crc_corruption_rejected(self):
        raw = bytearray(self._embedding_bytes())
        raw[20] ^= 0xFF  # flip a payload-adjacent byte
        with pytest.raises(DecodeError, match="checksum"):
            decode_message(bytes(raw))

    def test_truncation_rejected_without_partial_message(self):
        raw = self._embedding_bytes()
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            with pytest.raises(DecodeError):
                decode_message(raw[:cut])

    def test_bad_magic(self):
        raw = bytearray(self._embedding_bytes())
        raw[0:4] = b"XXXX"
        with pytest.raises(DecodeError, match="magic"):
            decode_message(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(self._embedding_bytes())
        raw[4] = 9
        # the corrupted version also breaks the checksum; either error is a
        # rejection, but it must not decode
        with pytest.raises(DecodeError):
            decode_message(bytes(raw))

    def test_stray_kl_frame(self):
        frame = encode_frame(TYPE_KL, 0, 0, (), np.array([[1.0]]))
        with pytest.raises(DecodeError, match="stray"):
            decode_message(frame)

    def test_trailing_bytes_rejected(self):
        raw = self._embedding_bytes() + b"\x00"
        with pytest.raises(DecodeError, match="trailing"):
            decode_message(raw)


class TestSchemaIsFeatureFree:
    def test_message_types_carry_no_raw_features(self):
        # structural: the only payload-bearing message fields are embedding
        # rows, gradient rows, and the KL/control scalars
        emb_fields = set(EmbeddingMessage.__dataclass_fields__)
        grad_fields = set(GradientMessage.__dataclass_fields__)
        ctrl_fields = set(ControlMessage.__dataclass_fields__)
        assert emb_fields == {"round", "client", "subjects", "rows", "kl"}
        assert grad_fields == {"round", "client", "subjects", "rows"}
        assert ctrl_fields == {"kind", "client", "round", "digest"}

    def test_row_count_must_match_subjects(self):
        with pytest.raises(ValueError):
            EmbeddingMessage(round=0, client=0, subjects=(1, 2),
                             rows=np.ones((3, 4)))
