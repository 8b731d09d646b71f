"""Smoke tests for the mega._core extension module."""

import json
import math

import numpy as np
import pytest

import mega


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    info = mega.generate_toy(str(out), seed=42, n_cases=3)
    cfg = json.load(open(info["config_path"]))
    mc = cfg["model"]["config"]
    model = mega.Model.load(
        info["model_path"],
        mc["n_layers"],
        mc["d_model"],
        mc["n_heads"],
        mc["d_ff"],
        mc["vocab_size"],
        mc["max_positions"],
    )
    cases = mega.load_cases_jsonl(info["dataset_path"])
    return model, cases, cfg


def test_sym_eig_diagonal():
    w, v = mega.sym_eig(np.diag([3.0, 2.0, 1.0]).astype(np.float32))
    assert np.allclose(w, [3.0, 2.0, 1.0])
    assert np.allclose(np.abs(np.diag(v)), 1.0, atol=1e-5)


def test_sqrtm_psd_squares_back():
    rng = np.random.RandomState(0)
    m = rng.randn(6, 6).astype(np.float32)
    s = m.T @ m
    r = mega.sqrtm_psd(s)
    assert np.linalg.norm(r @ r - s) <= 1e-4 * np.linalg.norm(s)


def test_pca_orthonormal_basis():
    rng = np.random.RandomState(1)
    data = rng.randn(100, 8).astype(np.float32)
    proj = mega.pca_fit(data, 4)
    basis = proj.basis
    assert np.allclose(basis @ basis.T, np.eye(4), atol=1e-5)
    assert proj.explained_variance.shape == (4,)
    assert np.all(np.diff(proj.explained_variance) <= 1e-6)


def test_transport_identity_on_same_samples():
    rng = np.random.RandomState(2)
    src = rng.randn(500, 3).astype(np.float32)
    t = mega.fit_transport(src, src, 1e-2)
    assert np.linalg.norm(t.A - np.eye(3)) <= 0.05
    assert np.linalg.norm(t.b) <= 0.05


def test_tokenizer_roundtrip():
    tok = mega.Tokenizer.byte_mode()
    assert tok.encode("ab") == [97, 98]
    assert tok.decode([97, 98]) == "ab"


def test_trace_telescoping(toy):
    model, cases, _ = toy
    tok = mega.Tokenizer.byte_mode()
    ids = tok.encode(cases[0].prompt)
    trace = model.forward_trace(ids, len(ids) - 1)
    y = ord(cases[0].target_new[0])
    profile = mega.contribution_profile(model, ids, len(ids) - 1, y)
    lo = model.logprob_from_state(trace.lin(0), y)
    hi = model.logprob_from_state(trace.lout(model.n_layers - 1), y)
    assert abs(profile.total() - (hi - lo)) <= 1e-4
    # trace additivity, exact in f32
    for l in range(model.n_layers):
        assert np.array_equal(trace.lres(l), trace.lin(l) + trace.attn(l))
        assert np.array_equal(trace.lout(l), trace.lres(l) + trace.ffn(l))


def test_classify_outcome_rules():
    assert mega.classify_outcome(0.0, 1.0, False) == "successful"
    assert mega.classify_outcome(0.0, 0.85, False) == "failed"
    assert mega.classify_outcome(0.3, 0.95, True) == "excluded"


def test_doubt_prompts_shape():
    di, dii = mega.make_doubt_prompts("p", "o", "t")
    assert di.endswith("Rethink and give the correct answer:")
    assert "Reconsider that the answer to" in dii


def test_end_to_end_steering_flips_the_case(toy):
    model, cases, cfg = toy
    tok = mega.Tokenizer.byte_mode()
    sc = cfg["steering"]
    case = cases[0]
    policy = mega.fit_policy(
        model,
        tok,
        case,
        window_lo=sc["window"][0],
        window_hi=sc["window"][1],
        component=sc["component"],
        k=sc["k"],
        lam=sc["lambda"],
        sigma=sc["sigma"],
        per_sample=sc["per_sample"],
        tau=sc["tau"],
        seed=cfg["dataset"]["seed"],
    )
    ids = tok.encode(case.prompt)
    logits, in_scope, dist = mega.steered_forward(model, policy, ids)
    assert in_scope
    assert dist <= sc["tau"]

    decoded = tok.decode(mega.steered_decode(model, policy, ids, 4))
    assert decoded.startswith(case.target_new)

    # far prompts gate off bit-exactly
    far = tok.encode("nothing to do with the edit")
    steered_far, far_in, _ = mega.steered_forward(model, policy, far)
    assert not far_in
    base_far = model.forward_logits(far, len(far) - 1)
    assert np.array_equal(steered_far, base_far)


def test_policy_save_load_roundtrip(toy, tmp_path):
    model, cases, cfg = toy
    tok = mega.Tokenizer.byte_mode()
    sc = cfg["steering"]
    policy = mega.fit_policy(
        model, tok, cases[1],
        window_lo=sc["window"][0], window_hi=sc["window"][1],
        k=8, tau=sc["tau"], seed=42,
    )
    path = str(tmp_path / "policy.json")
    policy.save(path)
    back = mega.SteeringPolicy.load(path)
    assert back.case_id == policy.case_id
    assert back.n_entries == policy.n_entries
    assert math.isclose(back.tau, policy.tau, rel_tol=1e-6)
