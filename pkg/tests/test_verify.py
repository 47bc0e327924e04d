import numpy as np
import pytest

from bayescond.verify import REGISTRY, VARIANTS, random_instance, random_operator, run_checks


def test_registry_size_and_names():
    names = [c.name for c in REGISTRY]
    assert len(names) >= 12 and len(set(names)) == len(names)


def test_all_checks_pass():
    report = run_checks(seed=0)
    failed = [r for r in report if r["status"] != "pass"]
    assert not failed, failed
    assert {"check", "status", "max_error"} <= set(report[0])


def test_fault_breaks_optimal_combination():
    (r,) = run_checks(seed=0, fault="kt_sign", names=["optimal_combination"])
    assert r["status"] == "fail" and r["max_error"] > 1e-3


def test_d1_instances_generated():
    rng = np.random.default_rng(0)
    for v in VARIANTS:
        inst = random_instance(rng, variant=v, d=1)
        assert inst.x_t.shape == (1,)
    assert run_checks(seed=1, names=["optimal_combination_degenerate_d1"])[0]["status"] == "pass"


@pytest.mark.parametrize("variant", VARIANTS)
def test_random_operators_small(variant):
    rng = np.random.default_rng(5)
    for d in (1, 2, 3, 4):
        op = random_operator(variant, rng, d)
        assert op.d == d


def test_threads_do_not_change_report():
    names = ["adjoint_identity", "sr_woodbury_inverse", "tweedie_consistency"]
    a = run_checks(seed=3, names=names)
    b = run_checks(seed=3, names=names, threads=3)
    assert a == b
