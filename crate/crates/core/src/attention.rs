//! Word-context attention between projected word features and image hidden
//! features.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

pub const MASK_SCORE: f64 = -1e30;

/// `e′ = U · e` per batch item: `U (D̂, D)`, `e (B, D, T)` gives `(B, D̂, T)`.
pub fn project_words<'g>(u: Var<'g>, e: Var<'g>) -> Result<Var<'g>> {
    let (us, es) = (u.shape(), e.shape());
    if us.len() != 2 || es.len() != 3 || us[1] != es[1] {
        return Err(Error::shape("project_words", format!("U {us:?}, e {es:?}")));
    }
    u.reshape(&[1, us[0], us[1]])?.bmm(e, false, false)
}

/// `(B, T, 1)` additive score bias: 0 for words, `MASK_SCORE` for the rest.
pub fn mask_bias(mask: &[Vec<bool>]) -> Result<Tensor> {
    let t = mask.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(mask.len() * t);
    for (b, row) in mask.iter().enumerate() {
        if row.len() != t {
            return Err(Error::shape("word_context", "ragged mask"));
        }
        if !row.iter().any(|&m| m) {
            return Err(Error::Mask { item: b });
        }
        data.extend(row.iter().map(|&m| if m { 0.0 } else { MASK_SCORE }));
    }
    Tensor::new(&[mask.len(), t, 1], data)
}

/// Scores `s = e′ᵀ h`, softmax over unmasked words for each subregion, and
/// context `c = e′ · α`. Returns `(c (B, D̂, N), α (B, T, N))`.
pub fn word_context<'g>(ep: Var<'g>, mask: &[Vec<bool>], h: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (es, hs) = (ep.shape(), h.shape());
    if es.len() != 3 || hs.len() != 3 || es[0] != hs[0] || es[1] != hs[1] || mask.len() != es[0] {
        return Err(Error::shape("word_context", format!("e′ {es:?}, h {hs:?}, mask {}", mask.len())));
    }
    let bias = mask_bias(mask)?;
    if bias.shape()[1] != es[2] {
        return Err(Error::shape("word_context", format!("mask width {} for {} words", bias.shape()[1], es[2])));
    }
    let scores = ep.bmm(h, true, false)?.add(ep.graph().constant(bias))?;
    let alpha = scores.softmax(1)?;
    let c = ep.bmm(alpha, false, false)?;
    Ok((c, alpha))
}

/// Top-`k` attended words of item `b`: score of word `i` is the mean of
/// `α[b, i, :]` over subregions; ties go to the lower index. Returns
/// `(word index, score)` pairs, at most the number of words.
pub fn top_attended(alpha: &Tensor, b: usize, mask: &[bool], k: usize) -> Vec<(usize, f64)> {
    let s = alpha.shape();
    let (t, n) = (s[1], s[2]);
    let row = &alpha.data()[b * t * n..(b + 1) * t * n];
    let mut scored: Vec<(usize, f64)> = (0..t)
        .filter(|&i| mask.get(i).copied().unwrap_or(false))
        .map(|i| (i, row[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, softmax, GradCheckConfig, Graph, ParamStore, RngStream};

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normals(n)).unwrap()
    }

    #[test]
    fn identity_and_zero_projection() {
        let mut rng = RngStream::new(1, "t");
        let g = Graph::new();
        let e = g.constant(rand_tensor(&[2, 4, 3], &mut rng));
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let id = g.constant(Tensor::new(&[4, 4], eye).unwrap());
        assert_eq!(project_words(id, e).unwrap().value().data(), e.value().data());
        let z = g.constant(Tensor::zeros(&[5, 4]));
        let out = project_words(z, e).unwrap();
        assert_eq!(out.shape(), vec![2, 5, 3]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_triple_loop() {
        let mut rng = RngStream::new(2, "t");
        let (b, dh, d, t) = (3, 5, 4, 6);
        let ut = rand_tensor(&[dh, d], &mut rng);
        let et = rand_tensor(&[b, d, t], &mut rng);
        let g = Graph::new();
        let out = project_words(g.constant(ut.clone()), g.constant(et.clone())).unwrap().value();
        for bb in 0..b {
            for r in 0..dh {
                for c in 0..t {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += ut.data()[r * d + k] * et.data()[(bb * d + k) * t + c];
                    }
                    assert!((out.data()[(bb * dh + r) * t + c] - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_word_gets_all_attention() {
        let mut rng = RngStream::new(3, "t");
        let g = Graph::new();
        let ep = g.constant(rand_tensor(&[1, 4, 1], &mut rng));
        let h = g.constant(rand_tensor(&[1, 4, 6], &mut rng));
        let (c, alpha) = word_context(ep, &[vec![true]], h).unwrap();
        assert!(alpha.value().data().iter().all(|&a| a == 1.0));
        let (cv, ev) = (c.value(), ep.value());
        for j in 0..6 {
            for d in 0..4 {
                assert_eq!(cv.data()[d * 6 + j], ev.data()[d]);
            }
        }
    }

    #[test]
    fn orthonormal_words_hand_oracle() {
        // e′ = first three standard basis vectors in R⁴, h_j = 10 · e′_0
        let g = Graph::new();
        let mut e = vec![0.0; 4 * 3];
        for i in 0..3 {
            e[i * 3 + i] = 1.0;
        }
        let mut h = vec![0.0; 4 * 5];
        for j in 0..5 {
            h[j] = 10.0;
        }
        let ep = g.constant(Tensor::new(&[1, 4, 3], e).unwrap());
        let hv = g.constant(Tensor::new(&[1, 4, 5], h).unwrap());
        let (_, alpha) = word_context(ep, &[vec![true; 3]], hv).unwrap();
        let denom = 10f64.exp() + 2.0;
        let expect = 10f64.exp() / denom;
        assert!((expect - softmax(&[10.0, 0.0, 0.0]).unwrap()[0]).abs() < 1e-15);
        for j in 0..5 {
            assert!((alpha.value().data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_word_changes_nothing() {
        let mut rng = RngStream::new(4, "t");
        let g = Graph::new();
        let et = rand_tensor(&[2, 4, 3], &mut rng);
        let ht = rand_tensor(&[2, 4, 5], &mut rng);
        let mask3 = vec![vec![true, true, false], vec![true, true, true]];
        let (c1, a1) = word_context(g.constant(et.clone()), &mask3, g.constant(ht.clone())).unwrap();
        // append a fourth word column full of junk, masked out
        let mut ext = Vec::new();
        for b in 0..2 {
            for d in 0..4 {
                ext.extend_from_slice(&et.data()[(b * 4 + d) * 3..(b * 4 + d + 1) * 3]);
                ext.push(7.5);
            }
        }
        let mask4: Vec<Vec<bool>> = mask3.iter().map(|m| [m.clone(), vec![false]].concat()).collect();
        let (c2, a2) = word_context(g.constant(Tensor::new(&[2, 4, 4], ext).unwrap()), &mask4, g.constant(ht)).unwrap();
        for (x, y) in c1.value().data().iter().zip(c2.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (a1, a2) = (a1.value(), a2.value());
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    assert!((a1.data()[(b * 3 + i) * 5 + j] - a2.data()[(b * 4 + i) * 5 + j]).abs() < 1e-12);
                }
            }
            for j in 0..5 {
                assert_eq!(a2.data()[(b * 4 + 3) * 5 + j], 0.0);
            }
        }
        // masked word inside the first item also gets exactly zero
        for j in 0..5 {
            assert_eq!(a1.data()[2 * 5 + j], 0.0);
        }
    }

    #[test]
    fn columns_are_stochastic_and_shift_invariant() {
        let mut rng = RngStream::new(5, "t");
        let g = Graph::new();
        let et = rand_tensor(&[3, 6, 4], &mut rng);
        let ht = rand_tensor(&[3, 6, 7], &mut rng);
        let mask = vec![vec![true; 4], vec![true, false, true, true], vec![true, false, false, false]];
        let (_, a) = word_context(g.constant(et), &mask, g.constant(ht)).unwrap();
        let a = a.value();
        for b in 0..3 {
            for j in 0..7 {
                let s: f64 = (0..4).map(|i| a.data()[(b * 4 + i) * 7 + j]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!((0..4).all(|i| a.data()[(b * 4 + i) * 7 + j] >= 0.0));
            }
        }
    }

    #[test]
    fn word_permutation_is_equivariant() {
        let mut rng = RngStream::new(6, "t");
        let g = Graph::new();
        let et = rand_tensor(&[1, 4, 3], &mut rng);
        let ht = rand_tensor(&[1, 4, 5], &mut rng);
        let perm = [2, 0, 1];
        let mut pe = vec![0.0; 12];
        for d in 0..4 {
            for (new, &old) in perm.iter().enumerate() {
                pe[d * 3 + new] = et.data()[d * 3 + old];
            }
        }
        let m = [vec![true; 3]];
        let (c1, a1) = word_context(g.constant(et), &m, g.constant(ht.clone())).unwrap();
        let (c2, a2) = word_context(g.constant(Tensor::new(&[1, 4, 3], pe).unwrap()), &m, g.constant(ht)).unwrap();
        for (x, y) in c1.value().data().iter().zip(c2.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..5 {
                assert!((a2.value().data()[new * 5 + j] - a1.value().data()[old * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let g = Graph::new();
        let e = g.constant(Tensor::zeros(&[2, 2, 2]));
        let h = g.constant(Tensor::zeros(&[2, 2, 3]));
        let r = word_context(e, &[vec![true, false], vec![false, false]], h);
        assert!(matches!(r, Err(Error::Mask { item: 1 })));
    }

    #[test]
    fn top_attended_rules() {
        let (t, n) = (5, 4);
        let uniform = Tensor::new(&[1, t, n], vec![0.2; t * n]).unwrap();
        let top = top_attended(&uniform, 0, &[true; 5], 5);
        assert_eq!(top.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(top.iter().all(|p| (p.1 - 0.2).abs() < 1e-15));

        let mut one = vec![0.0; t * n];
        for j in 0..n {
            one[3 * n + j] = 1.0;
        }
        let top = top_attended(&Tensor::new(&[1, t, n], one).unwrap(), 0, &[true; 5], 5);
        assert_eq!(top[0], (3, 1.0));
    }

    #[test]
    fn top_attended_matches_brute_force() {
        let mut rng = RngStream::new(7, "t");
        for _ in 0..50 {
            let (t, n) = (6, 5);
            let data: Vec<f64> = (0..t * n).map(|_| (rng.below(4) as f64) / 4.0).collect();
            let alpha = Tensor::new(&[1, t, n], data.clone()).unwrap();
            let mask: Vec<bool> = (0..t).map(|i| i < 5).collect();
            let got = top_attended(&alpha, 0, &mask, 3);
            // brute force: a word belongs in the top k iff fewer than k words beat it
            let score = |i: usize| data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            let beats = |a: usize, b: usize| score(a) > score(b) || (score(a) == score(b) && a < b);
            let mut expect: Vec<usize> = (0..5).filter(|&i| (0..5).filter(|&j| beats(j, i)).count() < 3).collect();
            expect.sort_by_key(|&i| (0..5).filter(|&j| beats(j, i)).count());
            assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), expect);
        }
    }

    #[test]
    fn word_context_gradients() {
        let mut rng = RngStream::new(8, "t");
        let mut s = ParamStore::new();
        s.insert("u", rand_tensor(&[4, 3], &mut rng));
        s.insert("e", rand_tensor(&[2, 3, 4], &mut rng));
        s.insert("h", rand_tensor(&[2, 4, 5], &mut rng));
        let target = rand_tensor(&[2, 4, 5], &mut rng);
        let mask = vec![vec![true, true, true, false], vec![true, false, true, true]];
        let r = grad_check(&s, GradCheckConfig::default(), |p| {
            let ep = project_words(p.get("u")?, p.get("e")?)?;
            let (c, alpha) = word_context(ep, &mask, p.get("h")?)?;
            let t = p.graph().constant(target.clone());
            c.mul(t)?.sum()?.add(alpha.square()?.sum()?)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
