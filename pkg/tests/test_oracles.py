import os
import stat
import sys

import pytest

from grafted import oracles as O
from grafted.errors import (
    InvalidGraph,
    OracleTimeout,
    OracleUnavailable,
    ProtocolError,
    SpawnFailure,
)
from grafted.molgraph import Atom, graph_from_edges, parse_smiles


@pytest.fixture
def ethanol():
    return parse_smiles("CCO")


class TestCalculators:
    def test_mw_ethanol(self, ethanol):
        # 2 x 12.011 + 6 x 1.008 + 15.999
        assert O.molecular_weight(ethanol) == pytest.approx(46.069, abs=0.01)

    def test_rotbonds_butane(self):
        assert O.rotatable_bonds(parse_smiles("CCCC")) == 1

    def test_rotbonds_ring_excluded(self):
        assert O.rotatable_bonds(parse_smiles("C1CCC1")) == 0

    def test_hbd_hba_ethanol(self, ethanol):
        assert O.hydrogen_bond_donors(ethanol) == 1
        assert O.hydrogen_bond_acceptors(ethanol) == 1

    def test_ring_count(self):
        assert O.ring_count(parse_smiles("c1ccc2ccccc2c1")) == 2
        assert O.ring_count(parse_smiles("CCCC")) == 0

    def test_logp_alkane_monotone(self):
        values = [O.logp_proxy(parse_smiles("C" * n)) for n in range(1, 10)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_qed_range(self):
        for smiles in ("C", "CCO", "c1ccccc1", "OC(=O)c1ccccc1N"):
            value = O.qed_proxy(parse_smiles(smiles))
            assert 0.0 < value <= 1.0

    def test_sa_range(self):
        for smiles in ("C", "CCO", "c1ccc2ccccc2c1"):
            value = O.sa_proxy(parse_smiles(smiles))
            assert 1.0 <= value <= 10.0

    def test_mw_increases_with_atoms(self):
        assert O.molecular_weight(parse_smiles("CC")) > O.molecular_weight(parse_smiles("C"))

    def test_permutation_invariance(self):
        a = parse_smiles("OCC")
        b = parse_smiles("CCO")
        for fn in (O.molecular_weight, O.hydrogen_bond_donors, O.hydrogen_bond_acceptors,
                   O.rotatable_bonds, O.ring_count, O.logp_proxy):
            assert fn(a) == pytest.approx(fn(b))

    def test_invalid_graph_rejected(self, ethanol):
        disconnected = graph_from_edges([Atom("C"), Atom("C")], [])
        with pytest.raises(InvalidGraph):
            O.compute_property(O.MW, disconnected)


class TestSpecs:
    def test_property_kind_parsing(self):
        assert O.property_kind("hba") == O.HBA
        assert O.property_kind("ext:drd2") == O.external("drd2")
        with pytest.raises(ValueError):
            O.property_kind("nope")

    def test_satisfies_increase_threshold(self, ethanol):
        spec = O.PropertySpec(O.HBA, O.Direction.INCREASE, 2)
        assert not O.satisfies(spec, ethanol, parse_smiles("OCCO"))  # delta 1 < 2
        assert O.satisfies(spec, ethanol, parse_smiles("OCC(O)O"))  # delta 2

    def test_satisfies_zero_threshold_boundary(self, ethanol):
        spec = O.PropertySpec(O.MW, O.Direction.INCREASE, 0)
        assert O.satisfies(spec, ethanol, ethanol)

    def test_satisfies_decrease_ring_formation(self):
        spec = O.PropertySpec(O.ROTBONDS, O.Direction.DECREASE, 1)
        assert O.satisfies(spec, parse_smiles("CCCC"), parse_smiles("C1CCC1"))

    def test_direction_antisymmetry(self, ethanol):
        bigger = parse_smiles("CCCO")
        inc = O.PropertySpec(O.MW, O.Direction.INCREASE, 1)
        dec = O.PropertySpec(O.MW, O.Direction.DECREASE, 1)
        assert O.satisfies(inc, ethanol, bigger)
        assert not O.satisfies(dec, ethanol, bigger)

    def test_default_min_delta(self):
        assert O.PropertySpec(O.HBA, O.Direction.INCREASE).resolved_min_delta() == 2.0
        assert O.PropertySpec(O.MW, O.Direction.INCREASE).resolved_min_delta() == pytest.approx(99.031)

    def test_reward_spec_validation(self):
        with pytest.raises(ValueError):
            O.RewardSpec(())
        with pytest.raises(ValueError):
            O.RewardSpec((O.PropertySpec(O.MW, O.Direction.INCREASE, 1),), tau=1.5)
        with pytest.raises(ValueError):
            O.RewardSpec((O.PropertySpec(O.MW, O.Direction.INCREASE, 1),), levels=(0.2, 0.2, 1.0))


class TestReward:
    def spec(self, min_delta=10.0):
        return O.RewardSpec((O.PropertySpec(O.MW, O.Direction.INCREASE, min_delta),), tau=0.15)

    def test_invalid_candidate_is_zero(self, ethanol):
        assert O.reward(self.spec(), ethanol, None) == 0.0
        disconnected = graph_from_edges([Atom("C"), Atom("C")], [])
        assert O.reward(self.spec(), ethanol, disconnected) == 0.0

    def test_identity_candidate_partial(self, ethanol):
        # Similar (tanimoto 1) but no property change: partial credit.
        assert O.reward(self.spec(), ethanol, ethanol) == 0.2

    def test_full_reward(self, ethanol):
        spec = O.RewardSpec((O.PropertySpec(O.HBA, O.Direction.INCREASE, 1),), tau=0.15)
        assert O.reward(spec, ethanol, parse_smiles("OCCO")) == 1.0

    def test_levels_are_exact(self, ethanol):
        candidates = [None, ethanol, parse_smiles("OCCO"), parse_smiles("CCCCCCCCCC")]
        spec = O.RewardSpec((O.PropertySpec(O.HBA, O.Direction.INCREASE, 1),), tau=0.15)
        for candidate in candidates:
            assert O.reward(spec, ethanol, candidate) in (0.0, 0.2, 1.0)

    def test_self_reward_at_least_partial(self):
        spec = O.RewardSpec((O.PropertySpec(O.MW, O.Direction.INCREASE, 5),), tau=0.65)
        for smiles in ("C", "CCO", "c1ccccc1"):
            g = parse_smiles(smiles)
            assert O.reward(spec, g, g) in (0.2, 1.0)


def _write_script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(f"#!{sys.executable}\n{body}", encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


class TestExternalOracle:
    def test_constant_oracle(self, tmp_path, ethanol):
        script = _write_script(
            tmp_path,
            "const.py",
            "import sys\nfor line in sys.stdin:\n    print(0.5)\n",
        )
        O.register_external_oracle("const", script)
        try:
            kind = O.external("const")
            assert O.compute_property(kind, ethanol) == 0.5
            values = O.get_external_oracle("const").evaluate_batch(["C", "CC", "CCC"])
            assert values == [0.5, 0.5, 0.5]
        finally:
            O.unregister_external_oracle("const")

    def test_missing_command(self):
        with pytest.raises(SpawnFailure):
            O.register_external_oracle("gone", "/no/such/binary")

    def test_unregistered_kind(self, ethanol):
        with pytest.raises(OracleUnavailable):
            O.compute_property(O.external("never_registered"), ethanol)

    def test_count_mismatch(self, tmp_path):
        script = _write_script(
            tmp_path,
            "short.py",
            "import sys\nlines = sys.stdin.readlines()\nfor l in lines[:-1]:\n    print(0.1)\n",
        )
        handle = O.register_external_oracle("short", script)
        try:
            with pytest.raises(ProtocolError):
                handle.evaluate_batch(["C", "CC"])
        finally:
            O.unregister_external_oracle("short")

    def test_non_numeric(self, tmp_path):
        script = _write_script(
            tmp_path,
            "junk.py",
            "import sys\nfor line in sys.stdin:\n    print('spam')\n",
        )
        handle = O.register_external_oracle("junk", script)
        try:
            with pytest.raises(ProtocolError):
                handle.evaluate_batch(["C"])
        finally:
            O.unregister_external_oracle("junk")

    def test_timeout(self, tmp_path):
        script = _write_script(
            tmp_path,
            "slow.py",
            "import sys, time\ntime.sleep(5)\n",
        )
        handle = O.register_external_oracle("slow", script, timeout=0.5)
        try:
            with pytest.raises(OracleTimeout):
                handle.evaluate_batch(["C"])
        finally:
            O.unregister_external_oracle("slow")
