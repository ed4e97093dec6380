//! Finite-difference checks of every loss on 4x4 double-precision inputs.

use lfda_autograd::gradcheck::check_gradient;
use lfda_autograd::{Array, Ctx, TensorError, Var};
use lfda_core::layers::{normal_array, seeded_rng};
use lfda_core::losses::*;
use lfda_core::networks::{DiscKind, Discriminator};
use lfda_core::perceptual::PerceptualExtractor;
use lfda_core::LfdaError;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn tensor(e: LfdaError) -> TensorError {
    match e {
        LfdaError::Tensor(t) => t,
        other => panic!("unexpected error: {other}"),
    }
}

fn rand01(shape: &[usize], seed: u64) -> Array {
    normal_array(shape, 0.25, &mut seeded_rng(seed, "loss-test")).map(|v| (v + 0.5).clamp(0.02, 0.98))
}

/// (check name, relative error of analytic vs. central-difference gradient).
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let gt = rand01(&[1, 1, 4, 4], 20).map(|v| v * 5.0 + 1.0);
    let pred = rand01(&[1, 1, 4, 4], 21).map(|v| v * 5.0 + 1.0);
    let mut mask = Array::ones(&[1, 1, 4, 4]);
    mask.data_mut()[3] = 0.0;
    let g = check_gradient(&pred, EPS, |p| depth_l1(p, &gt, &mask).map_err(tensor)).unwrap();
    out.push(("depth_l1", g.rel_error));

    let img = rand01(&[1, 3, 4, 4], 22);
    let d = rand01(&[1, 1, 4, 4], 23).map(|v| v * 8.0);
    let g = check_gradient(&d, EPS, |x| smoothness_loss(x, &img).map_err(tensor)).unwrap();
    out.push(("smoothness", g.rel_error));

    let a = rand01(&[1, 3, 4, 4], 24);
    let b = rand01(&[1, 3, 4, 4], 25);
    let g = check_gradient(&a, EPS, |x| ssim(x, &Var::constant(b.clone())).map_err(tensor)).unwrap();
    out.push(("ssim", g.rel_error));

    let right = rand01(&[1, 3, 4, 4], 26);
    let left = rand01(&[1, 3, 4, 4], 27);
    // Disparities in (0.3, 0.9) px keep samples off integer positions.
    let depth = rand01(&[1, 1, 4, 4], 28).map(|v| 1.0 / (0.3 + 0.6 * v));
    let w = LossWeights::default();
    let via_depth = |d: &Var| {
        let (warped, mask) = inverse_warp(&Var::constant(right.clone()), d, 1.0, 1.0).map_err(tensor)?;
        geometry_loss(&left, &warped, &mask, &w).map_err(tensor)
    };
    let g = check_gradient(&depth, EPS, via_depth).unwrap();
    out.push(("geometry wrt depth", g.rel_error));
    let via_image = |r: &Var| {
        let (warped, mask) = inverse_warp(r, &Var::constant(depth.clone()), 1.0, 1.0).map_err(tensor)?;
        geometry_loss(&left, &warped, &mask, &w).map_err(tensor)
    };
    let g = check_gradient(&right, EPS, via_image).unwrap();
    out.push(("geometry wrt right image", g.rel_error));

    let real = rand01(&[1, 1, 4, 4], 29);
    let fake = rand01(&[1, 1, 4, 4], 30);
    let g = check_gradient(&real, EPS, |r| Ok(lsgan_disc_loss(r, &Var::constant(fake.clone())))).unwrap();
    out.push(("lsgan disc wrt real", g.rel_error));
    let g = check_gradient(&fake, EPS, |f| Ok(lsgan_disc_loss(&Var::constant(real.clone()), f))).unwrap();
    out.push(("lsgan disc wrt fake", g.rel_error));
    let g = check_gradient(&fake, EPS, |f| Ok(lsgan_gen_loss(f))).unwrap();
    out.push(("lsgan gen", g.rel_error));

    let ctx = Ctx::no_grad();
    let p = PerceptualExtractor::seeded(&[4, 6], &[1, 2], 31).unwrap();
    let w = LossWeights {
        w_trans_con: vec![0.5, 1.0],
        w_trans_sty: vec![1.0, 0.5],
        w_recon: vec![0.25, 1.0],
        ..LossWeights::default()
    };
    let disc = Discriminator::new("d", DiscKind::SourceToTarget, 3, &[2], &mut seeded_rng(32, "d"));
    let c = Var::constant(rand01(&[1, 3, 4, 4], 33));
    let s = Var::constant(rand01(&[1, 3, 4, 4], 34));
    let t = rand01(&[1, 3, 4, 4], 35);
    let g = check_gradient(&t, EPS, |x| translation_loss(&ctx, &p, &c, &s, x, &disc, &w).map_err(tensor)).unwrap();
    out.push(("translation", g.rel_error));
    let g = check_gradient(&t, EPS, |x| reconstruction_loss(&p, &c, x, &w).map_err(tensor)).unwrap();
    out.push(("reconstruction", g.rel_error));

    out.push(("alignment (reversed)", alignment_rel_error()));

    let w = LossWeights::default();
    let x = rand01(&[9], 39);
    let g = check_gradient(&x, EPS, |v| {
        let terms: Vec<(Term, Var)> = Term::ALL
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, v.narrow(0, i, 1).unwrap().sum().sqr()))
            .collect();
        total_loss_var(&terms, &w).map_err(tensor)
    })
    .unwrap();
    out.push(("total", g.rel_error));
    out
}

/// The forward value is the plain objective; the reversal flips and scales
/// only the gradient, so the reference is -lambda times the difference
/// quotient.
fn alignment_rel_error() -> f64 {
    let ctx = Ctx::no_grad();
    let disc = Discriminator::new("d", DiscKind::Feature, 2, &[3], &mut seeded_rng(36, "d"));
    let zs = rand01(&[2, 2, 4, 4], 37);
    let zt = Var::constant(rand01(&[2, 2, 4, 4], 38));
    let lambda = 0.6;
    let value = |z: &Array| {
        alignment_loss(&ctx, &Var::constant(z.clone()), &zt, &disc, lambda, AlignLabels::SourceReal)
            .unwrap()
            .encoder
            .item()
    };
    let leaf = Var::leaf(zs.clone());
    let a = alignment_loss(&ctx, &leaf, &zt, &disc, lambda, AlignLabels::SourceReal).unwrap();
    let analytic = a.encoder.backward().unwrap().get(&leaf).unwrap().clone();
    let mut numeric = Array::zeros(zs.shape());
    let mut probe = zs.clone();
    for i in 0..zs.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPS;
        let plus = value(&probe);
        probe.data_mut()[i] = orig - EPS;
        let minus = value(&probe);
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = -lambda * (plus - minus) / (2.0 * EPS);
    }
    let norm = |a: &Array| a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(&analytic.zip_map(&numeric, |a, b| a - b)) / norm(&numeric)
}
