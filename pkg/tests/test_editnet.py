import numpy as np
import pytest
import torch

from grafted.dataset import EditSample
from grafted.diffusion import fully_masked_state
from grafted.editnet import (
    ModelConfig,
    attention_bias,
    backward,
    forward,
    init_params,
    make_batch,
    parameter_count,
    parameter_shapes,
)
from grafted.errors import ShapeMismatch
from grafted.molgraph import parse_smiles
from grafted.tokenizer import build_vocab, encode_sample

MW_UP = "Help me increase the molecular weight of this molecule [SMILE]."
HBA_UP = "Add more hydrogen bond acceptors to this molecule [SMILE]."


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(
        [
            EditSample(MW_UP, "CCO", "OCCO"),
            EditSample(HBA_UP, "CCC", "CCCC"),
        ]
    )


@pytest.fixture(scope="module")
def config(vocab):
    return ModelConfig(
        layers=2, heads=2, hidden=32, ffn=64, edge_embed=8,
        text_vocab=vocab.text_size, atom_vocab=vocab.atom_size, max_len=64,
    )


@pytest.fixture(scope="module")
def params(config):
    return init_params(config, seed=11)


def _batch(vocab, pairs):
    seqs = [
        encode_sample(instr, parse_smiles(src), parse_smiles(tgt), vocab)
        for instr, src, tgt in pairs
    ]
    return make_batch(seqs, vocab), seqs


class TestInit:
    def test_same_seed_bit_identical(self, config):
        a = init_params(config, seed=3)
        b = init_params(config, seed=3)
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seeds_differ(self, config):
        a = init_params(config, seed=3)
        b = init_params(config, seed=4)
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_param_count_closed_form(self, config):
        params = init_params(config, seed=0)
        assert sum(p.numel() for p in params.values()) == parameter_count(config)
        assert set(params) == set(parameter_shapes(config))

    def test_hidden_divisible_by_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(layers=1, heads=3, hidden=32)


class TestForward:
    def test_shapes_and_rows(self, vocab, config, params):
        batch, seqs = _batch(vocab, [(MW_UP, "CCO", "OCCO"), (HBA_UP, "CCC", "CC")])
        out = forward(params, batch, config)
        n_max = max(s.n for s in seqs)
        m_max = max(s.m for s in seqs)
        assert out.node_logits.shape == (2, m_max, config.atom_vocab)
        assert out.edge_logits.shape == (2, m_max, m_max, config.edge_states)
        assert out.text_logits.shape == (2, n_max, config.text_vocab)
        for attn in out.attentions:
            rows = attn.sum(dim=-1)
            assert torch.allclose(rows, torch.ones_like(rows), atol=1e-5)

    def test_edge_logits_symmetric(self, vocab, config, params):
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        out = forward(params, batch, config)
        assert torch.allclose(out.edge_logits, out.edge_logits.transpose(1, 2))

    def test_deterministic(self, vocab, config, params):
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        a = forward(params, batch, config)
        b = forward(params, batch, config)
        assert torch.equal(a.node_logits, b.node_logits)
        assert torch.equal(a.edge_logits, b.edge_logits)
        assert torch.equal(a.text_logits, b.text_logits)

    def test_padding_invariance(self, vocab, config, params):
        alone, seqs_a = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        padded, seqs_b = _batch(vocab, [(MW_UP, "CCO", "OCCO"), (HBA_UP, "CCCCCC", "CCCCCCC")])
        out_a = forward(params, alone, config)
        out_b = forward(params, padded, config)
        s = seqs_a[0]
        assert torch.allclose(
            out_a.node_logits[0, : s.m], out_b.node_logits[0, : s.m], atol=1e-5
        )
        assert torch.allclose(
            out_a.text_logits[0, : s.n], out_b.text_logits[0, : s.n], atol=1e-5
        )
        assert torch.allclose(
            out_a.edge_logits[0, : s.m, : s.m], out_b.edge_logits[0, : s.m, : s.m], atol=1e-5
        )

    def test_too_long_sequence(self, vocab, config, params):
        long_smiles = "C" * 40
        batch, _ = _batch(vocab, [(MW_UP, long_smiles, long_smiles)])
        with pytest.raises(ShapeMismatch):
            forward(params, batch, config)


class TestAttentionBias:
    def test_matches_reference_everywhere(self, vocab, config, params):
        seq = encode_sample(MW_UP, parse_smiles("CCO"), parse_smiles("OCCO"), vocab)
        batch = make_batch([seq], vocab)
        out = forward(params, batch, config, collect_bias=True)
        n, k, m = seq.n, seq.k, seq.m
        src_edges = seq.src_edges
        tgt_edges = seq.tgt_edges
        total = n + k + m
        for layer in range(config.layers):
            prev = out.attentions[layer - 1][0] if layer > 0 else None
            for head in range(config.heads):
                for i in range(0, total, 3):
                    for j in range(0, total, 2):
                        expected = attention_bias(
                            params, layer, head, i, j, n, k, m, src_edges, tgt_edges, prev
                        )
                        actual = float(out.biases[layer][0, head, i, j])
                        assert actual == pytest.approx(expected, abs=1e-5), (layer, head, i, j)

    def test_cross_segment_zero(self, vocab, config, params):
        seq = encode_sample(MW_UP, parse_smiles("CCO"), parse_smiles("OCCO"), vocab)
        prev = None
        # i in text, j in source: always zero.
        value = attention_bias(params, 0, 0, 1, seq.n + 1, seq.n, seq.k, seq.m,
                               seq.src_edges, seq.tgt_edges, prev)
        assert value == 0.0

    def test_layer0_target_bias_uses_masked_edges(self, vocab, config, params):
        src = parse_smiles("CCO")
        state = fully_masked_state(4, t=8)
        seq = encode_sample(MW_UP, src, state, vocab)
        batch = make_batch([seq], vocab)
        out = forward(params, batch, config, collect_bias=True)
        i = seq.n + seq.k
        expected = attention_bias(
            params, 0, 0, i, i + 1, seq.n, seq.k, seq.m, seq.src_edges, seq.tgt_edges, None
        )
        assert float(out.biases[0][0, 0, i, i + 1]) == pytest.approx(expected, abs=1e-6)
        # Masked edge embedding differs from NONE: changing the state changes the bias.
        clean_seq = encode_sample(MW_UP, src, parse_smiles("OCCO"), vocab)
        clean_out = forward(params, make_batch([clean_seq], vocab), config, collect_bias=True)
        assert not torch.allclose(
            out.biases[0][0, :, i:, i:], clean_out.biases[0][0, :, i:, i:]
        )

    def test_deeper_layers_inherit_previous_attention(self, vocab, config, params):
        seq = encode_sample(MW_UP, parse_smiles("CCO"), parse_smiles("OCCO"), vocab)
        batch = make_batch([seq], vocab)
        out = forward(params, batch, config, collect_bias=True)
        lo = seq.n + seq.k
        assert torch.allclose(
            out.biases[1][:, :, lo:, lo:], out.attentions[0][:, :, lo:, lo:]
        )

    def test_source_bias_constant_across_layers(self, vocab, config, params):
        # Same projection table is consulted every layer; with tied u_src values
        # the bias block would repeat, here we just assert it is nonzero and
        # consults the source edges at every layer.
        seq = encode_sample(MW_UP, parse_smiles("CCO"), parse_smiles("OCCO"), vocab)
        batch = make_batch([seq], vocab)
        out = forward(params, batch, config, collect_bias=True)
        lo, hi = seq.n, seq.n + seq.k
        for layer in range(config.layers):
            block = out.biases[layer][0, :, lo:hi, lo:hi]
            assert float(block.abs().max()) > 0


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, vocab, config, params):
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        out = forward(params, batch, config)
        grads = backward(params, batch, config, {"node": torch.zeros_like(out.node_logits)})
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    def test_unused_head_gets_zero_grad(self, vocab, config, params):
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        out = forward(params, batch, config)
        grads = backward(params, batch, config, {"node": torch.ones_like(out.node_logits)})
        assert float(grads["text_head.w"].abs().max()) == 0.0
        assert float(grads["edge_head.w1"].abs().max()) == 0.0
        assert float(grads["node_head.w2"].abs().max()) > 0.0

    def test_grad_keys_match_param_keys(self, vocab, config, params):
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCCO")])
        out = forward(params, batch, config)
        grads = backward(params, batch, config, {"text": torch.ones_like(out.text_logits)})
        assert set(grads) == set(params)

    def test_spot_finite_difference(self, vocab, config):
        # Full-parameter sweeps live in the acceptance suite; spot-check here.
        params64 = init_params(config, seed=5, dtype=torch.float64)
        batch, _ = _batch(vocab, [(MW_UP, "CCO", "OCC")])
        out = forward(params64, batch, config)
        upstream = {"edge": torch.randn_like(out.edge_logits)}
        grads = backward(params64, batch, config, upstream)

        def loss_of(p):
            return float((forward(p, batch, config).edge_logits * upstream["edge"]).sum())

        rng = np.random.default_rng(0)
        h = 1e-5
        for name in ("layers.0.attn.wq", "edge_head.w1", "layers.0.u_tgt", "atom_embed"):
            flat_index = int(rng.integers(0, params64[name].numel()))
            bumped = {k: v.clone() for k, v in params64.items()}
            bumped[name].view(-1)[flat_index] += h
            up = loss_of(bumped)
            bumped[name].view(-1)[flat_index] -= 2 * h
            down = loss_of(bumped)
            fd = (up - down) / (2 * h)
            analytic = float(grads[name].view(-1)[flat_index])
            assert analytic == pytest.approx(fd, rel=1e-6, abs=1e-9), name
