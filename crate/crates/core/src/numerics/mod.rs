//! Deterministic tensor algebra: reverse-mode autodiff graph, seeded random
//! streams, parameter stores with Adam, and the PSD matrix square root.

mod gradcheck;
mod graph;
pub mod kernels;
mod linalg;
mod params;
mod rng;
mod stochastic;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{softmax, Gradients, Graph, Var};
pub use linalg::sqrtm_psd;
pub use params::{Adam, Bound, NamedGrads, ParamStore};
pub use rng::RngStream;
pub use stochastic::{gaussian_kl, gaussian_kl_vec, reparam_sample, reparam_sample_vec};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let a = softmax(&[1.0, 2.0]).unwrap();
        let b = softmax(&[11.0, 12.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // exp-normalize in extended precision: e^k / (e + e^2 + e^3)
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (x, w) in softmax(&[1.0, 2.0, 3.0]).unwrap().iter().zip(want) {
            assert!((x - w).abs() < 1e-12);
        }
        assert!(matches!(softmax(&[1.0, f64::INFINITY]), Err(Error::Numerics { .. })));
    }

    proptest! {
        #[test]
        fn softmax_unit_sum_and_shift_invariance(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&xs).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut RngStream, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn check<F>(store: &ParamStore, f: F)
    where
        F: for<'g> Fn(&Bound<'g, '_>) -> crate::Result<Var<'g>>,
    {
        let r = grad_check(store, GradCheckConfig::default(), f).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn grad_affine_and_nonlinearities() {
        let mut rng = RngStream::new(1, "t");
        let mut s = ParamStore::new();
        s.insert("x", rand_tensor(&[3, 4], &mut rng, 1.0));
        s.insert("w", rand_tensor(&[5, 4], &mut rng, 0.5));
        s.insert("b", rand_tensor(&[5], &mut rng, 0.5));
        check(&s, |p| {
            let y = p.get("x")?.linear(p.get("w")?, Some(p.get("b")?))?;
            let a = y.tanh()?.add(y.sigmoid()?)?;
            let c = y.leaky_relu(0.2)?.add(y.relu()?)?;
            a.mul(c)?.add(y.exp()?.scale(0.1)?)?.sum()
        });
    }

    #[test]
    fn grad_broadcast_division_and_log() {
        let mut rng = RngStream::new(2, "t");
        let mut s = ParamStore::new();
        s.insert("a", rand_tensor(&[2, 3, 4], &mut rng, 1.0));
        let pos: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        s.insert("b", Tensor::new(&[1, 3, 1], pos).unwrap());
        check(&s, |p| {
            let a = p.get("a")?;
            let b = p.get("b")?;
            a.div(b)?.sub(b)?.square()?.add(b.ln()?)?.sum()
        });
    }

    #[test]
    fn grad_softmax_family_and_cosine() {
        let mut rng = RngStream::new(3, "t");
        let mut s = ParamStore::new();
        s.insert("x", rand_tensor(&[2, 5, 3], &mut rng, 1.0));
        let w = rand_tensor(&[2, 5, 3], &mut rng, 1.0);
        check(&s, move |p| {
            let x = p.get("x")?;
            let wc = p.graph().constant(w.clone());
            let a = x.softmax(1)?.mul(wc)?.sum()?;
            let b = x.log_softmax(2)?.mul(wc)?.sum()?;
            let c = x.logsumexp(0)?.sum()?;
            let d = x.l2_normalize(1)?.mul(wc)?.sum()?;
            a.add(b)?.add(c)?.add(d)
        });
    }

    #[test]
    fn grad_bmm_all_transposes_with_broadcast() {
        let mut rng = RngStream::new(4, "t");
        let mut s = ParamStore::new();
        s.insert("a", rand_tensor(&[1, 3, 4], &mut rng, 1.0));
        s.insert("at", rand_tensor(&[2, 4, 3], &mut rng, 1.0));
        s.insert("b", rand_tensor(&[2, 4, 5], &mut rng, 1.0));
        s.insert("bt", rand_tensor(&[1, 5, 4], &mut rng, 1.0));
        let w = rand_tensor(&[2, 3, 5], &mut rng, 1.0);
        check(&s, move |p| {
            let wc = p.graph().constant(w.clone());
            let mut total = p.graph().scalar(0.0);
            for (a, ta) in [("a", false), ("at", true)] {
                for (b, tb) in [("b", false), ("bt", true)] {
                    let y = p.get(a)?.bmm(p.get(b)?, ta, tb)?;
                    total = total.add(y.mul(wc)?.sum()?)?;
                }
            }
            Ok(total)
        });
    }

    #[test]
    fn bmm_matches_naive_triple_loop() {
        let mut rng = RngStream::new(14, "t");
        let a = rand_tensor(&[2, 3, 4], &mut rng, 1.0);
        let b = rand_tensor(&[2, 4, 5], &mut rng, 1.0);
        let g = Graph::new();
        let c = g.constant(a.clone()).bmm(g.constant(b.clone()), false, false).unwrap().value();
        for t in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += a.data()[t * 12 + i * 4 + p] * b.data()[t * 20 + p * 5 + j];
                    }
                    assert!((c.data()[t * 15 + i * 5 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_conv_pool_upsample() {
        let mut rng = RngStream::new(5, "t");
        let mut s = ParamStore::new();
        s.insert("x", rand_tensor(&[2, 2, 6, 6], &mut rng, 1.0));
        s.insert("w", rand_tensor(&[3, 2, 3, 3], &mut rng, 0.5));
        s.insert("b", rand_tensor(&[3], &mut rng, 0.5));
        s.insert("w2", rand_tensor(&[2, 3, 1, 1], &mut rng, 0.5));
        let wt = rand_tensor(&[2, 2, 6, 6], &mut rng, 1.0);
        check(&s, move |p| {
            let y = p.get("x")?.conv2d(p.get("w")?, Some(p.get("b")?), 2, 1)?; // (2,3,3,3)
            let z = y.tanh()?.upsample2x()?.conv2d(p.get("w2")?, None, 1, 0)?; // (2,2,6,6)
            let pooled = z.global_avg_pool()?.square()?.sum()?;
            z.mul(p.graph().constant(wt.clone()))?.sum()?.add(pooled)
        });
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = RngStream::new(15, "t");
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng, 1.0);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_batch_norm() {
        let mut rng = RngStream::new(6, "t");
        let mut s = ParamStore::new();
        s.insert("x", rand_tensor(&[3, 2, 2, 2], &mut rng, 1.0));
        s.insert("g", rand_tensor(&[2], &mut rng, 1.0));
        s.insert("b", rand_tensor(&[2], &mut rng, 1.0));
        let wt = rand_tensor(&[3, 2, 2, 2], &mut rng, 1.0);
        check(&s, move |p| {
            let y = p.get("x")?.batch_norm(p.get("g")?, p.get("b")?, 1e-5)?;
            y.mul(p.graph().constant(wt.clone()))?.sum()
        });
    }

    #[test]
    fn grad_structural_ops_and_bce() {
        let mut rng = RngStream::new(7, "t");
        let mut s = ParamStore::new();
        s.insert("x", rand_tensor(&[2, 3, 4], &mut rng, 1.0));
        s.insert("y", rand_tensor(&[2, 1, 4], &mut rng, 1.0));
        s.insert("emb", rand_tensor(&[5, 3], &mut rng, 1.0));
        let wt = rand_tensor(&[4, 2, 4], &mut rng, 1.0);
        check(&s, move |p| {
            let x = p.get("x")?;
            let cat = p.graph().concat(&[x, p.get("y")?], 1)?; // (2,4,4)
            let perm = cat.permute(&[1, 0, 2])?; // (4,2,4)
            let a = perm.mul(p.graph().constant(wt.clone()))?.sum()?;
            let sl = cat.slice(1, 1, 2)?.sum_axis(2)?.square()?.sum()?;
            let e = p.get("emb")?.embedding(&[4, 0, 4, 2])?; // (4,3)
            let bce = e.reshape(&[12])?.bce_with_logits(&[1.0, 0.0, 0.5, 1.0, 0.0, 1.0, 1.0, 0.0, 0.3, 0.0, 1.0, 1.0])?;
            a.add(sl)?.add(bce)?.add(e.mean()?)
        });
    }

    #[test]
    fn ops_report_non_finite() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![800.0]));
        match x.exp() {
            Err(Error::Numerics { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected numerics error, got {other:?}"),
        }
        let z = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(matches!(z.l2_normalize(0), Err(Error::Numerics { op: "cosine", .. })));
    }

    #[test]
    fn bce_constant_half_is_ln2() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let l = x.bce_with_logits(&[1.0, 0.0, 1.0, 0.0]).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
