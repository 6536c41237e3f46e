use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use snp_core::autodiff::Graph;
use snp_core::nn::{ParamId, ParamStore};
use snp_core::shapes2d::{sample_episode2d, Episode2D, Regime};
use snp_core::tensor::Tensor;
use snp_core::tgqn::{PreparedScene, SceneModelKind, TgqnConfig, TgqnModel};

fn jitter(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn episode(regime: Regime, steps: usize, seed: u64) -> Episode2D {
    sample_episode2d(regime, steps, seed).unwrap()
}

/// Worst relative error over a seeded subset of coordinates, with at least
/// a few entries from every parameter tensor.
fn gradcheck(kind: SceneModelKind, data: &PreparedScene, dropped: &[bool]) -> f64 {
    // unit weight: the weighted constant term would swamp f64 differences
    let cfg = TgqnConfig {
        pixel_weight: 1.0,
        ..TgqnConfig::micro(kind)
    };
    let (model, mut store) = TgqnModel::new(cfg, 11).unwrap();
    jitter(&mut store, 42, 0.2);
    let seed = 23;
    let (_, grads) = model.loss_and_grads(&store, data, 1.0, dropped, seed).unwrap();
    let objective = |s: &ParamStore<f64>| model.loss_and_grads(s, data, 1.0, dropped, seed).unwrap().0.combined;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut coords = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        coords.extend(idx.into_iter().take(4.max(n / 10)).map(|i| (id, i)));
    }
    // dense ReLU stacks put some pre-activations within 1e-5 of a kink
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, i) in coords {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let up = objective(&store);
        store.get_mut(id).data_mut()[i] = orig - h;
        let down = objective(&store);
        store.get_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = -grads.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
        if rel > 1e-3 {
            eprintln!("{} [{i}]: analytic {an:e} numeric {fd:e}", store.name(id));
        }
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn tgqn_gradients_match_central_differences() {
    let (model, _) = TgqnModel::new(TgqnConfig::micro(SceneModelKind::Tgqn), 0).unwrap();
    let data = model.prepare(&episode(Regime::Tracking, 3, 5), Some(2));
    let err = gradcheck(SceneModelKind::Tgqn, &data, &[false, true, false]);
    assert!(err < 1e-3, "worst relative error {err:e}");
}

#[test]
fn gqn_gradients_match_central_differences() {
    let (model, _) = TgqnModel::new(TgqnConfig::micro(SceneModelKind::Gqn), 0).unwrap();
    let data = model.prepare(&episode(Regime::Prediction, 2, 6), Some(2));
    let err = gradcheck(SceneModelKind::Gqn, &data, &[false, false]);
    assert!(err < 1e-3, "worst relative error {err:e}");
}

fn copy_channels(src: &Tensor<f64>, s0: usize, dst: &mut Tensor<f64>, d0: usize, len: usize) {
    let (out, src_in, k2) = (src.dim(0), src.dim(1), src.dim(2) * src.dim(3));
    let dst_in = dst.dim(1);
    for o in 0..out {
        for c in 0..len {
            for j in 0..k2 {
                let v = src.data()[(o * src_in + s0 + c) * k2 + j];
                dst.data_mut()[(o * dst_in + d0 + c) * k2 + j] = v;
            }
        }
    }
}

fn zero_channels(dst: &mut Tensor<f64>, d0: usize, len: usize) {
    let (out, din, k2) = (dst.dim(0), dst.dim(1), dst.dim(2) * dst.dim(3));
    for o in 0..out {
        for c in d0..d0 + len {
            for j in 0..k2 {
                dst.data_mut()[(o * din + c) * k2 + j] = 0.0;
            }
        }
    }
}

fn copy_param(store: &mut ParamStore<f64>, from: ParamId, to: ParamId) {
    let t = store.get(from).clone();
    *store.get_mut(to) = t;
}

#[test]
fn tied_inference_falls_back_to_prior() {
    let cfg = TgqnConfig::micro(SceneModelKind::Tgqn);
    let (model, mut store) = TgqnModel::new(cfg.clone(), 4).unwrap();
    jitter(&mut store, 5, 0.3);
    let ids = model.draw_param_ids();
    let (zd, hid) = (cfg.z_depth, cfg.hidden);
    // generative input channels: [z, hp]; inference: [z, hp, hq], fixed [h, b]
    let gen_w = store.get(ids.gen_w).clone();
    let mut inf_w = store.get(ids.inf_w).clone();
    copy_channels(&gen_w, 0, &mut inf_w, 0, zd);
    zero_channels(&mut inf_w, zd, hid);
    copy_channels(&gen_w, zd, &mut inf_w, zd + hid, hid);
    *store.get_mut(ids.inf_w) = inf_w;
    let gen_fixed = store.get(ids.gen_fixed).clone();
    let mut inf_fixed = store.get(ids.inf_fixed).clone();
    copy_channels(&gen_fixed, 0, &mut inf_fixed, 0, hid);
    zero_channels(&mut inf_fixed, hid, hid);
    *store.get_mut(ids.inf_fixed) = inf_fixed;
    copy_param(&mut store, ids.gen_b, ids.inf_b);
    copy_param(&mut store, ids.hp0, ids.hq0);
    copy_param(&mut store, ids.cp0, ids.cq0);

    let hw = cfg.latent_hw;
    let empty = PreparedScene {
        ctx: vec![Vec::new()],
        tgt: vec![Vec::new()],
    };
    let b = model.backward_encode(&store, &empty).unwrap().remove(0);
    let (h0, _, _) = model.initial_state(&store).unwrap();
    let ctx = Tensor::zeros(&[cfg.repr, hw, hw]);
    let noise = model.draw_noise(1, 9).steps.remove(0);
    let post = model.draw_posterior(&store, &h0, &ctx, &b, &noise).unwrap();
    let prior = model.draw_prior(&store, &h0, &ctx, &noise).unwrap();
    let q = post.posterior.as_ref().unwrap();
    for (qs, ps) in q.iter().zip(&post.prior) {
        for (a, b) in qs.mean.iter().zip(&ps.mean).chain(qs.std.iter().zip(&ps.std)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
    assert!(post.kl.unwrap().iter().all(|&k| k.abs() < 1e-12));
    for (a, b) in post.z.data().iter().zip(prior.z.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn context_order_does_not_matter() {
    let (model, store) = TgqnModel::new(TgqnConfig::micro(SceneModelKind::Tgqn), 1).unwrap();
    let ep = episode(Regime::Prediction, 4, 3);
    let mut shuffled = ep.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for st in &mut shuffled.steps {
        st.context.shuffle(&mut rng);
    }
    let a = model.elbo_snp(&store, &model.prepare(&ep, Some(3)), 2).unwrap();
    let b = model.elbo_snp(&store, &model.prepare(&shuffled, Some(3)), 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prior_latents_ignore_queries_and_kl_splits_over_draw_steps() {
    for kind in [SceneModelKind::Tgqn, SceneModelKind::Gqn] {
        let (model, store) = TgqnModel::new(TgqnConfig::micro(kind), 2).unwrap();
        let data = model.prepare(&episode(Regime::Tracking, 3, 4), Some(3));
        let mut fewer = data.clone();
        for t in &mut fewer.tgt {
            t.reverse();
            t.truncate(1);
        }
        let noise = model.draw_noise(3, 8);
        let g = Graph::<f64>::new();
        let a = model.rollout(&g, &store, &data, &[false; 3], &noise).unwrap();
        let b = model.rollout(&g, &store, &fewer, &[false; 3], &noise).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x.draw.z.value(), *y.draw.z.value());
        }
        let post = model.rollout(&g, &store, &data, &[true; 3], &noise).unwrap();
        for sv in &post {
            let total = sv.draw.kl().unwrap().item();
            let parts: f64 = sv.draw.kl_terms().unwrap().iter().sum();
            assert!((total - parts).abs() <= 1e-9 * total.abs().max(1.0));
            assert!(total >= 0.0);
        }
    }
}

#[test]
fn baseline_generation_ignores_future_contexts() {
    let (model, store) = TgqnModel::new(TgqnConfig::micro(SceneModelKind::Gqn), 6).unwrap();
    let data = model.prepare(&episode(Regime::Tracking, 4, 12), Some(1));
    let mut edited = data.clone();
    for o in edited.ctx[2..].iter_mut().flatten() {
        o.image.iter_mut().for_each(|v| *v = 0.5);
    }
    let noise = model.draw_noise(4, 1);
    let a = model.generate(&store, &data, &noise).unwrap();
    let b = model.generate(&store, &edited, &noise).unwrap();
    assert_eq!(a[..2], b[..2]);
}
