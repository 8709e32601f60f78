use cdg_core::autodiff::grad_check;
use cdg_core::cdg::{cdg_forward, guidance_memory, init_params, CdgParams};
use cdg_core::loss::{cdg_loss_node, total_loss_node, LossWeights};
use cdg_core::pipeline::gradcheck_suite;
use cdg_core::{Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `[H, W, C]` -> `[W, H, C]`.
fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let &[h, w, c] = t.shape() else {
        panic!("rank 3 expected")
    };
    let mut out = Vec::with_capacity(t.numel());
    for x in 0..w {
        for y in 0..h {
            out.extend_from_slice(&t.data()[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(&[w, h, c], out).unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn full_objective_passes_gradient_check() {
    let rows = gradcheck_suite(0, 1e-4).unwrap();
    for name in [
        "cdg.alpha",
        "cdg.beta",
        "cdg.fuse.weight",
        "cdg.dist_head_h.bias",
        "decoder.weight",
    ] {
        assert!(rows.iter().any(|r| r.param == name), "{name} missing");
    }
    for r in &rows {
        assert!(r.max_rel_err <= 1e-3, "{}: {:e}", r.param, r.max_rel_err);
    }
}

#[test]
fn squared_output_objective_passes_gradient_check() {
    for seed in 0..3 {
        let params: CdgParams<f64> = init_params(8, 4, seed).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(seed, &[8, 8, 8], -1.0, 1.0));
        let out = cdg_forward(&mut g, x, &params, Mode::Train).unwrap();
        let sq = g.mul(out.x_o, out.x_o).unwrap();
        let m = g.mean(sq).unwrap();
        let w = LossWeights::default();
        let gh = random(seed + 100, &[8, 4], 0.0, 1.0);
        let gv = random(seed + 200, &[8, 4], 0.0, 1.0);
        let c = cdg_loss_node(&mut g, out.p_h, out.p_v, gh, gv, &w).unwrap();
        let loss = total_loss_node(&mut g, m, None, Some(c), &w).unwrap();
        let names: Vec<String> = g.param_names().map(String::from).collect();
        assert_eq!(names.len(), 22);
        for p in names {
            let e = grad_check(&g, loss, &p, 1e-4).unwrap();
            assert!(e <= 1e-3, "seed {seed} `{p}`: {e:e}");
        }
    }
}

#[test]
fn axes_are_treated_symmetrically() {
    for mode in [Mode::Train, Mode::Eval] {
        let params: CdgParams<f64> = init_params(6, 3, 2).unwrap();
        let x = random(5, &[5, 7, 6], -1.0, 1.0);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let out = cdg_forward(&mut g, xi, &params, mode).unwrap();
        let mut gt = Graph::new();
        let xt = gt.constant(transpose(&x));
        let tout = cdg_forward(&mut gt, xt, &params.transposed(), mode).unwrap();

        // Reordered sums differ in the last bits only.
        assert_close(gt.value(tout.x_o), &transpose(g.value(out.x_o)), 1e-12);
        assert_close(gt.value(tout.p_h), g.value(out.p_v), 1e-12);
        assert_close(gt.value(tout.p_v), g.value(out.p_h), 1e-12);
        assert_close(gt.value(tout.a_d), &transpose(g.value(out.a_d)), 1e-12);
    }
}

#[test]
fn sigmoid_branches_stay_open() {
    let params: CdgParams<f64> = init_params(8, 5, 1).unwrap();
    for (seed, scale) in [(0, 1.0), (1, 10.0), (2, 0.01)] {
        let mut g = Graph::new();
        let x = g.constant(random(seed, &[2, 6, 4, 8], -scale, scale));
        let out = cdg_forward(&mut g, x, &params, Mode::Train).unwrap();
        for id in [out.a_h, out.a_v, out.p_h, out.p_v] {
            assert!(g.value(id).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn eval_mode_is_a_pure_function() {
    let params: CdgParams<f32> = init_params(4, 3, 8).unwrap();
    let x = random(3, &[4, 4, 4], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let out = cdg_forward(&mut g, xi, &params, Mode::Eval).unwrap();
        g.value(out.x_o).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn guidance_storage_is_linear_in_side_length() {
    for side in [8usize, 16, 32] {
        let params: CdgParams<f32> = init_params(16, 4, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[side, side, 16], 0.1f32));
        let out = cdg_forward(&mut g, x, &params, Mode::Eval).unwrap();
        assert_eq!(out.guidance_elements(&g), 2 * side * 16);
        let m = guidance_memory(side as u64, side as u64, 16);
        assert_eq!(m.cdg, out.guidance_elements(&g) as u64);
        if side == 32 {
            assert!(m.attention_reference >= 64 * m.cdg);
        }
    }
}
