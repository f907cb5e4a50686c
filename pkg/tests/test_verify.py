import pytest

from pyLoRAOver.exceptions import ParameterInvalid
from pyLoRAOver.verify import (Property, check_bound, check_determinism, check_grad, check_merge, check_mpo,
                               check_ordering, check_selection, run_suites)


def _all_passed(props):
    return all(p.passed for p in props), [p for p in props if not p.passed]


def test_property_to_dict():
    d = Property('n_add', 2304, 2304, True, plan='768x8').to_dict()
    assert d == {'name': 'n_add', 'passed': True, 'measured': 2304, 'threshold': 2304, 'plan': '768x8'}


def test_check_mpo():
    props = check_mpo(trials=1, big_trials=1)
    ok, failed = _all_passed(props)
    assert ok, failed
    assert {p.name for p in props} >= {'round_trip_rel_error', 'n_add_768x8', 'plan_generator_tables',
                                       'plan_4096x8_m9', 'bond_brute_force_mismatches', 'round_trip_seconds'}


@pytest.mark.slow
def test_check_mpo_full_size():
    props = {p.name: p for p in check_mpo()}
    assert props['round_trip_rel_error'].details['decompositions'] == 12 * 100 + 10
    assert props['round_trip_seconds'].passed, props['round_trip_seconds']
    assert props['round_trip_rel_error'].passed


def test_check_bound():
    ok, failed = _all_passed(check_bound(trials=30))
    assert ok, failed


def test_check_grad():
    props = check_grad()
    ok, failed = _all_passed(props)
    assert ok, failed
    assert 'fd_chain_contract_m5' in {p.name for p in props}


def test_check_merge():
    ok, failed = _all_passed(check_merge(trials=5))
    assert ok, failed


def test_check_determinism(make_config):
    props = check_determinism(seed=2, base=make_config('over-runtime', steps=10, top_n=1, split=1, interval=5))
    assert props[0].passed


@pytest.mark.slow
def test_check_selection():
    ok, failed = _all_passed(check_selection(seeds=10))
    assert ok, failed


def test_check_ordering_layout(make_config):
    base = make_config('lora', steps=10, top_n=2, split=2, interval=5)
    prop, = check_ordering(seeds=2, base=base)
    assert prop.name == 'over_runtime_le_lora'
    assert set(prop.details) == {'lora_mean', 'over_runtime_mean', 'cohens_d', 'paired_t', 'seed_violations'}
    assert 0 <= prop.details['seed_violations'] <= 2
    assert prop.passed == (prop.details['over_runtime_mean'] <= prop.details['lora_mean'])


@pytest.mark.slow
def test_check_ordering():
    ok, failed = _all_passed(check_ordering(seeds=10))
    assert ok, failed


class TestRunSuites:
    def test_report_layout(self):
        report = run_suites(['bound'], trials=5)
        assert list(report['suites']) == ['bound']
        assert report['passed'] is True
        assert report['suites']['bound'][0]['name'] == 'bound_violations'

    def test_unknown_suite(self):
        with pytest.raises(ParameterInvalid):
            run_suites(['speed'])
