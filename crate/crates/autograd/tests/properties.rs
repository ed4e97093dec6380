use lfda_autograd::{Array, Ctx, Param, Var};
use proptest::prelude::*;

proptest! {
    #[test]
    fn concat_then_narrow_recovers_parts(a in prop::collection::vec(-5.0f64..5.0, 24), b in prop::collection::vec(-5.0f64..5.0, 16)) {
        let va = Var::constant(Array::from_vec(&[2, 3, 2, 2], a).unwrap());
        let vb = Var::constant(Array::from_vec(&[2, 2, 2, 2], b).unwrap());
        let cat = Var::concat(&[va.clone(), vb.clone()], 1).unwrap();
        let head = cat.narrow(1, 0, 3).unwrap();
        let tail = cat.narrow(1, 3, 2).unwrap();
        prop_assert_eq!(head.value(), va.value());
        prop_assert_eq!(tail.value(), vb.value());
    }

    #[test]
    fn spatial_mean_is_linear(a in prop::collection::vec(-5.0f64..5.0, 32), b in prop::collection::vec(-5.0f64..5.0, 32)) {
        let va = Var::constant(Array::from_vec(&[2, 1, 4, 4], a).unwrap());
        let vb = Var::constant(Array::from_vec(&[2, 1, 4, 4], b).unwrap());
        let lhs = va.add(&vb).unwrap().spatial_mean().unwrap();
        let rhs = va.spatial_mean().unwrap().add(&vb.spatial_mean().unwrap()).unwrap();
        prop_assert!(lhs.value().max_abs_diff(rhs.value()) < 1e-12);
    }
}

#[test]
fn ctx_records_reads_and_shares_leaves() {
    let p = Param::new("w", Array::ones(&[2]));
    let q = Param::new("unused", Array::ones(&[2]));
    let ctx = Ctx::new();
    let a = ctx.param(&p);
    let b = ctx.param(&p);
    assert_eq!(a.id(), b.id());
    let loss = a.add(&b).unwrap().sum();
    let grads = loss.backward().unwrap();
    assert_eq!(ctx.grad(&grads, &p).unwrap().data(), &[2.0, 2.0]);
    assert!(ctx.grad(&grads, &q).is_none());
    assert_eq!(ctx.accessed(), vec![p.id()]);
    assert_ne!(p.clone().id(), p.id());
}

#[test]
fn no_grad_ctx_builds_constant_graphs() {
    let p = Param::new("w", Array::ones(&[2]));
    let ctx = Ctx::no_grad();
    let v = ctx.param(&p).sqr().sum();
    assert!(!v.requires_grad());
    assert!(v.backward().unwrap().is_empty());
}
