from hqvae import benchmark, kernels


def test_benchmark_runs_both_backends(capsys):
    res = benchmark.run(repeat=1, number=1, batch=2, channels=3, size=8)
    backends = {b for _, b in res}
    assert "python" in backends
    if kernels.BACKEND == "cython":
        assert "cython" in backends
    assert all(v > 0 for v in res.values())
    benchmark.main(["--batch", "2", "--channels", "3", "--size", "8", "--repeat", "1", "--number", "1"])
    assert "gelu fwd" in capsys.readouterr().out
