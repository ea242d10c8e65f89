import math
import time

import numpy as np
import pytest

from conftest import toy_bag, toy_model
from granular_ot.autodiff import GradTape, check_gradients
from granular_ot.errors import ConfigError, InputError
from granular_ot.model import ModelConfig, forward_slide
from granular_ot.ot import SinkhornConfig
from granular_ot.prompts import MAGNIFICATIONS
from granular_ot.trainer import slide_loss


def straight_line_distances(model, bag):
    """Every stage spelled out with loops over plain floats and arrays."""
    cfg = model.cfg
    lam, iters = cfg.sinkhorn.lam, cfg.sinkhorn.iterations
    W = model.frozen["text_stub.W"]
    out = np.zeros((cfg.classes, 2))
    for k, mag in enumerate(MAGNIFICATIONS):
        level = getattr(bag, mag)
        H, coords = level.features, [tuple(c) for c in level.coords]
        n, d = H.shape
        nbrs = [[j for j in range(n) if abs(coords[i][0] - coords[j][0]) + abs(coords[i][1] - coords[j][1]) == 1] for i in range(n)]
        th_s, th_t = model.params[f"gat.{mag}.theta_s"], model.params[f"gat.{mag}.theta_t"]
        a_s, a_t = model.params[f"gat.{mag}.a_s"][:, 0], model.params[f"gat.{mag}.a_t"][:, 0]
        S = [th_s @ H[i] for i in range(n)]
        T = [th_t @ H[i] for i in range(n)]
        H_gr = np.zeros_like(H)
        for i in range(n):
            members = [i] + nbrs[i]
            logits = []
            for j in members:
                z = a_s @ S[i] + a_t @ T[j]
                logits.append(z if z > 0 else cfg.gat_slope * z)
            w = [math.exp(v - max(logits)) for v in logits]
            H_gr[i] = (w[0] * S[i] + sum(w[t] * T[j] for t, j in enumerate(members) if t > 0)) / sum(w)

        def pool(q, keys):
            s = [float(q @ keys[t]) / math.sqrt(d) for t in range(len(keys))]
            e = [math.exp(v - max(s)) for v in s]
            v = sum(e[t] * keys[t] for t in range(len(keys))) / sum(e)
            return (v - v.mean()) / math.sqrt(v.var() + 1e-5) + q

        for c in range(cfg.classes):
            pv = model.params[f"pv.{c}.{mag}"]
            vis = [(1 - cfg.alpha) * pool(pv[q], H) + cfg.alpha * pool(pv[q], H_gr) for q in range(cfg.N_p)]
            tok = model.params[f"tok.{c}.{mag}"]
            ctx = model.frozen[f"ctx.{c}"]
            txt = []
            for m in range(cfg.M):
                seq = list(tok[m * cfg.K : (m + 1) * cfg.K]) + list(ctx)
                txt.append(np.tanh(W @ (sum(seq) / len(seq))))
            C = np.zeros((cfg.M, cfg.N_p))
            for i in range(cfg.M):
                for j in range(cfg.N_p):
                    cos = txt[i] @ vis[j] / (np.linalg.norm(txt[i]) * np.linalg.norm(vis[j]))
                    C[i, j] = min(max(1.0 - cos, 0.0), 2.0)
            K = [[math.exp(-C[i, j] / lam) for j in range(cfg.N_p)] for i in range(cfg.M)]
            a, b = [0.0] * cfg.M, [1.0] * cfg.N_p
            for _ in range(iters):
                a = [(1 / cfg.M) / sum(K[i][j] * b[j] for j in range(cfg.N_p)) for i in range(cfg.M)]
                b = [(1 / cfg.N_p) / sum(K[i][j] * a[i] for i in range(cfg.M)) for j in range(cfg.N_p)]
            out[c, k] = sum(a[i] * K[i][j] * b[j] * C[i, j] for i in range(cfg.M) for j in range(cfg.N_p))
    return out


class TestForwardSlide:
    def test_straight_line_oracle(self, model, bag):
        D, _ = forward_slide(model, model.prepare(bag))
        np.testing.assert_allclose(D.data, straight_line_distances(model, bag), rtol=0, atol=1e-8)

    def test_straight_line_oracle_more_classes(self):
        model, bag = toy_model(3, classes=3, M=3, N_p=2), toy_bag(3)
        D, _ = forward_slide(model, model.prepare(bag))
        np.testing.assert_allclose(D.data, straight_line_distances(model, bag), rtol=0, atol=1e-8)

    def test_alpha_zero_equals_patch_only(self, model, bag):
        m0 = model.with_config(alpha=0.0)
        prep = m0.prepare(bag)
        a, _ = forward_slide(m0, prep)
        b, _ = forward_slide(m0, prep, patch_only=True)
        assert a.data.tobytes() == b.data.tobytes()

    def test_symmetric_model_is_class_blind(self):
        model = toy_model(5, symmetric=True)
        D, _ = forward_slide(model, model.prepare(toy_bag(5, signal=0.0)))
        assert np.abs(D.data[0] - D.data[1]).max() <= 1e-9

    def test_cosine_mode(self, model, bag):
        cos = model.with_config(distance="cosine")
        D, plans = forward_slide(cos, cos.prepare(bag))
        assert plans == {}
        assert D.shape == (2, 2) and np.all((D.data >= 0) & (D.data <= 2))

    def test_fixed_plans_reproduce(self, model, bag):
        prep = model.prepare(bag)
        D, plans = forward_slide(model, prep)
        D2, _ = forward_slide(model, prep, plans=plans)
        assert D.data.tobytes() == D2.data.tobytes()

    def test_unbalanced_head(self, model, bag):
        uot = model.with_config(sinkhorn=SinkhornConfig(uot=(1.0, 1.0)))
        D, plans = forward_slide(uot, uot.prepare(bag))
        assert np.all(np.isfinite(D.data))
        assert any(abs(p.mass - 1.0) > 1e-6 for p in plans.values())

    def test_knn_graph(self, bag):
        model = toy_model(graph="knn", knn_k=2)
        D, _ = forward_slide(model, model.prepare(bag))
        assert np.all(np.isfinite(D.data))

    def test_width_mismatch(self, model):
        with pytest.raises(InputError, match="width"):
            model.prepare(toy_bag(d=5))

    def test_deterministic(self, model, bag):
        a, _ = forward_slide(model, model.prepare(bag))
        b, _ = forward_slide(model.copy(), model.prepare(bag))
        assert a.data.tobytes() == b.data.tobytes()

    def test_mode_switch_keeps_parameter_shapes(self):
        ot, cos = toy_model(7), toy_model(7, distance="cosine")
        assert {k: v.shape for k, v in ot.params.items()} == {k: v.shape for k, v in cos.params.items()}

    @pytest.mark.parametrize("kw", [dict(distance="l2"), dict(graph="full"), dict(alpha=1.2)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)


class TestSlideLossGradients:
    def test_full_loss_with_frozen_plans(self, model, bag):
        prep = model.prepare(bag)
        _, plans = forward_slide(model, prep)
        start = time.perf_counter()
        rep = check_gradients(lambda P: slide_loss(model, prep, bag.label, P, plans)[0], model.params)
        assert rep.passed, str(rep)
        assert time.perf_counter() - start < 10.0

    def test_every_parameter_group_gets_gradient(self, model, bag):
        tape = GradTape()
        P = {k: tape.watch(v, name=k) for k, v in model.params.items()}
        grads = tape.backward(slide_loss(model, model.prepare(bag), bag.label, P)[0])
        for k, t in P.items():
            assert np.any(grads[t] != 0.0), k
