import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tetra.errors import DataFormatError, NumericError
from tetra.kernels import (
    PackedTernary,
    bench_records_to_csv,
    benchmark_matmul,
    BENCH_MATMUL_COLUMNS,
    pack,
    ternary_accumulate,
    ternary_matmul,
    unpack,
)
from tetra.quantize import (
    QuantizedActivation,
    TernaryTensor,
    act_dequantize,
    act_quantize,
    ternary_dequantize,
    ternary_quantize,
)


def make_ternary(codes, gamma=1.0, shape=None):
    codes = np.asarray(codes, dtype=np.int8)
    return TernaryTensor(shape=shape or codes.shape, codes=codes, gamma=gamma)


class TestPack:
    def test_bit_layout_example(self):
        p = pack(make_ternary([1, 0, -1, 1]))
        assert p.data.tolist() == [0x71]

    def test_all_zero(self):
        p = pack(make_ternary([0] * 8))
        assert p.data.tolist() == [0x00, 0x00]

    def test_partial_byte(self):
        p = pack(make_ternary([1, 1, 1, 1, 1]))
        assert p.data.tolist() == [0x55, 0x01]

    def test_size_is_quarter(self):
        for n in [1, 2, 3, 4, 5, 31, 32, 33, 1000]:
            p = pack(make_ternary(np.zeros(n, dtype=np.int8)))
            assert p.data.size == (n + 3) // 4


class TestUnpack:
    def test_inverse_of_layout_example(self):
        p = PackedTernary(rows=1, cols=4, data=np.array([0x71], dtype=np.uint8), gamma=1.0)
        assert unpack(p).codes.ravel().tolist() == [1, 0, -1, 1]

    def test_zero_bytes(self):
        p = PackedTernary(rows=1, cols=8, data=np.zeros(2, dtype=np.uint8), gamma=1.0)
        assert unpack(p).codes.ravel().tolist() == [0] * 8

    def test_invalid_field_detected(self):
        p = PackedTernary(rows=1, cols=4, data=np.array([0b00_10_00_00], dtype=np.uint8), gamma=1.0)
        with pytest.raises(DataFormatError):
            unpack(p)

    @given(st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=200),
           st.floats(0, 10, allow_nan=False))
    @settings(max_examples=100)
    def test_roundtrip(self, codes, gamma):
        t = make_ternary(codes, gamma=float(np.float32(gamma)))
        back = unpack(pack(t))
        assert back.gamma == t.gamma
        assert back.codes.ravel().tolist() == t.codes.tolist()

    def test_roundtrip_2d_including_ragged(self):
        rng = np.random.default_rng(0)
        for r, c in [(1, 1), (3, 5), (7, 7), (4, 9), (13, 3)]:
            t = ternary_quantize(rng.standard_normal((r, c)))
            assert unpack(pack(t)) == t


class TestTernaryMatmul:
    def test_worked_example(self):
        w = make_ternary([[1, -1], [0, 1]], gamma=0.5)
        a = QuantizedActivation(codes=np.array([[3, 2]]), scales=np.array([0.1]))
        out = ternary_matmul(pack(w), a)
        np.testing.assert_allclose(out, [[0.05], [0.10]], rtol=1e-12)

    def test_zero_weights(self):
        w = make_ternary(np.zeros((3, 4), dtype=np.int8), gamma=0.0)
        a = act_quantize(np.random.default_rng(1).standard_normal((2, 4)))
        assert np.all(ternary_matmul(pack(w), a) == 0.0)

    def test_identity_pattern(self):
        w = make_ternary(np.eye(4, dtype=np.int8), gamma=1.0)
        codes = np.array([[5, -3, 2, 100]], dtype=np.int8)
        a = QuantizedActivation(codes=codes, scales=np.array([1.0]))
        out = ternary_matmul(pack(w), a)
        np.testing.assert_array_equal(out[:, 0], codes[0].astype(float))

    def test_dimension_mismatch(self):
        w = make_ternary(np.zeros((2, 3), dtype=np.int8))
        a = act_quantize(np.ones((2, 4)))
        with pytest.raises(ValueError):
            ternary_matmul(pack(w), a)

    def test_overflow_bound_enforced(self):
        p = PackedTernary(rows=1, cols=2**23 + 1,
                          data=np.zeros((2**23 + 1 + 3) // 4, dtype=np.uint8), gamma=1.0)
        a = QuantizedActivation(codes=np.zeros((1, 2**23 + 1), dtype=np.int8),
                                scales=np.array([1.0]))
        with pytest.raises(NumericError):
            ternary_matmul(p, a)

    def test_matches_float_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            m, k, n = rng.integers(1, 48, size=3)
            t = ternary_quantize(rng.standard_normal((m, k)))
            a = act_quantize(rng.standard_normal((n, k)) * rng.uniform(0.1, 5))
            out = ternary_matmul(pack(t), a)
            ref = ternary_dequantize(t) @ act_dequantize(a).T
            np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-12)

    def test_fast_agrees_with_add_only_reference(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            m, k, n = rng.integers(1, 48, size=3)
            t = ternary_quantize(rng.standard_normal((m, k)))
            a = act_quantize(rng.standard_normal((n, k)))
            p = pack(t)
            fast = ternary_accumulate(p, a, kernel="fast")
            ref = ternary_accumulate(p, a, kernel="reference")
            assert fast.dtype == ref.dtype == np.int32
            np.testing.assert_array_equal(fast, ref)
            np.testing.assert_array_equal(
                ternary_matmul(p, a, kernel="fast"), ternary_matmul(p, a, kernel="reference")
            )


class TestMemoryFootprint:
    def test_packed_bytes_ratio(self):
        n = 200_000
        t = ternary_quantize(np.random.default_rng(0).standard_normal((400, 500)))
        p = pack(t)
        assert p.nbytes == (n + 3) // 4 + 4
        assert p.nbytes / (4 * n) <= 1 / 15.5

    def test_ratio_approaches_sixteen(self):
        for n in [10_000, 100_000, 1_000_000]:
            packed_bits = 2 * n + 32
            assert 4 * n * 8 / packed_bits == pytest.approx(16.0, rel=32 / (2 * n) + 1e-12)


class TestBenchmark:
    def test_zero_repeats_rejected(self):
        with pytest.raises(ValueError):
            benchmark_matmul([(4, 4, 4)], repeats=0)

    def test_small_benchmark_runs(self):
        records = benchmark_matmul([(32, 32, 8)], repeats=3)
        assert len(records) == 2
        kinds = {r["kernel"] for r in records}
        assert kinds == {"ternary", "float32"}
        for r in records:
            assert r["median_ns"] > 0

    def test_weight_bytes_ratio(self):
        records = benchmark_matmul([(512, 512, 4)], repeats=1)
        tern = next(r for r in records if r["kernel"] == "ternary")
        f32 = next(r for r in records if r["kernel"] == "float32")
        assert f32["bytes_weights"] / tern["bytes_weights"] > 15.5

    def test_csv_schema(self):
        records = benchmark_matmul([(8, 8, 8)], repeats=2)
        text = bench_records_to_csv(records, BENCH_MATMUL_COLUMNS)
        header = text.splitlines()[0]
        assert header == "kernel,m,k,n,median_ns,p10_ns,p90_ns,bytes_weights"
        assert len(text.splitlines()) == 3
