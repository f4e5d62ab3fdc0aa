//! Minimal dense-tensor kernel with reverse-mode gradients.

mod adam;
mod gradcheck;
mod graph;
mod lstm;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_all, grad_check_coords, DEFAULT_STEP};
pub use graph::{softmax, Gradients, Graph, NodeId};
pub use lstm::{lstm_cell, lstm_sequence, LstmNodes};
pub use params::{ParamId, ParamStore};


#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let proj = g.constant(t(&[2, 2], &[1., 0., 0., 0.])).unwrap();
        let n = g.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        let q = g.matmul(proj, n).unwrap();
        assert_eq!(g.value(q).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(g.matmul(a, b).is_err());
        let x = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(g.matvec(a, x).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, &[3, 4])).unwrap();
        let b = store.add("b", random_tensor(&mut rng, &[4, 2])).unwrap();
        let weights = random_tensor(&mut rng, &[6]);
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = g.param(s, a);
            let bn = g.param(s, b);
            let c = g.matmul(an, bn)?;
            // flatten via row extraction so every output coordinate matters
            let r0 = g.row(c, 0)?;
            let r1 = g.row(c, 1)?;
            let r2 = g.row(c, 2)?;
            let flat = g.concat(&[r0, r1, r2])?;
            let w = g.constant(weights.clone())?;
            g.dot(flat, w)
        };
        let (err, _) = grad_check_all(&store, DEFAULT_STEP, build).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn zero_cell(g: &mut Graph<f64>, d_in: usize, h: usize) -> LstmNodes {
        let w = g.constant(Tensor::zeros(&[4 * h, d_in + h])).unwrap();
        let b = g.constant(Tensor::zeros(&[4 * h])).unwrap();
        LstmNodes { w, b, hidden: h }
    }

    #[test]
    fn lstm_zero_weights() {
        let mut g = Graph::<f64>::new();
        let cell = zero_cell(&mut g, 3, 2);
        let x = g.constant(t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let z = g.constant(Tensor::zeros(&[2])).unwrap();
        let (h, c) = lstm_cell(&mut g, cell, x, z, z).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);

        let ones = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let (h, c) = lstm_cell(&mut g, cell, x, z, ones).unwrap();
        for (&hv, &cv) in g.value(h).data().iter().zip(g.value(c).data()) {
            assert!((cv - 0.5).abs() < 1e-12);
            assert!((hv - 0.5 * 0.5f64.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_rejects_bad_weights() {
        let mut g = Graph::<f64>::new();
        let cell = zero_cell(&mut g, 3, 2);
        let x = g.constant(Tensor::zeros(&[4])).unwrap();
        let z = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(lstm_cell(&mut g, cell, x, z, z).is_err());
    }

    #[test]
    fn lstm_unrolled_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d_in, h) = (3, 4);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, &[4 * h, d_in + h])).unwrap();
        let b = store.add("b", random_tensor(&mut rng, &[4 * h])).unwrap();
        let x0 = store.add("x0", random_tensor(&mut rng, &[d_in])).unwrap();
        let xs: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut rng, &[d_in])).collect();
        let readout = random_tensor(&mut rng, &[h]);
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let cell = LstmNodes {
                w: g.param(s, w),
                b: g.param(s, b),
                hidden: h,
            };
            let mut inputs = vec![g.param(s, x0)];
            for x in &xs {
                inputs.push(g.constant(x.clone())?);
            }
            let hs = lstm_sequence(g, cell, &inputs, false)?;
            let r = g.constant(readout.clone())?;
            g.dot(hs[2], r)
        };
        let (err, name) = grad_check_all(&store, DEFAULT_STEP, build).unwrap();
        assert!(err <= 1e-4, "{err} at {name:?}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0f64, 0.0]);
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[1000.0f32, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] < 1e-6 && s.iter().all(|x| x.is_finite()));
        let s = softmax(&[1.0f64, 2.0, 3.0]);
        for (a, b) in s.iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 2.])).unwrap();
        let b = g.constant(t(&[1], &[3.])).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3.]);
        let single = g.concat(&[a]).unwrap();
        assert_eq!(g.value(single).data(), g.value(a).data());
        assert!(g.concat(&[]).is_err());

        let parts: Vec<Tensor<f64>> = (0..3)
            .map(|k| Tensor::vector((0..300).map(|i| (k * 300 + i) as f64).collect()))
            .collect();
        let ids: Vec<NodeId> = parts.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
        let big = g.concat(&ids).unwrap();
        assert_eq!(g.value(big).len(), 900);
        for (k, p) in parts.iter().enumerate() {
            let back = g.slice(big, k * 300, 300).unwrap();
            assert_eq!(g.value(back), p);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![1.5f32; 64])).unwrap();
        let same = g.dropout(x, 1.0, true, &mut rng).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let eval = g.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        assert!(g.dropout(x, 0.0, true, &mut rng).is_err());
        assert!(g.dropout(x, 1.5, true, &mut rng).is_err());

        let ones = g.constant(Tensor::vector(vec![1.0f32; 100_000])).unwrap();
        let d = g.dropout(ones, 0.5, true, &mut rng).unwrap();
        let mean: f64 = g.value(d).data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((0.97..=1.03).contains(&mean), "{mean}");
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::<f64>::new();
        let mut c = |a: &[f64], b: &[f64]| {
            let x = g.constant(t(&[2], a)).unwrap();
            let y = g.constant(t(&[2], b)).unwrap();
            let n = g.cosine(x, y).unwrap();
            g.scalar_value(n)
        };
        assert_eq!(c(&[1., 0.], &[1., 0.]), 1.0);
        assert_eq!(c(&[1., 0.], &[0., 1.]), 0.0);
        assert!((c(&[1., 0.], &[1., 1.]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert_eq!(c(&[0., 0.], &[1., 1.]), 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = <x, x> + sum(x): each use of x contributes
        let mut store = ParamStore::new();
        let x = store.add("x", t(&[3], &[1., -2., 0.5])).unwrap();
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let d = g.dot(xn, xn).unwrap();
        let s = g.sum_elems(xn).unwrap();
        let y = g.add(d, s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(x).unwrap().data(), &[3., -3., 2.]);
    }

    #[test]
    fn grad_check_closed_forms() {
        let mut store = ParamStore::new();
        let x = store.add("x", t(&[4], &[0.3, -1.2, 2.0, 0.7])).unwrap();
        let err = grad_check(&store, x, DEFAULT_STEP, |g, s| {
            let xn = g.param(s, x);
            g.dot(xn, xn)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");

        let err = grad_check(&store, x, DEFAULT_STEP, |g, _| g.scalar(4.2)).unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, &[5])).unwrap();
        let b = store.add("b", random_tensor(&mut rng, &[5])).unwrap();
        let m = store.add("m", random_tensor(&mut rng, &[3, 5])).unwrap();
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let (an, bn, mn) = (g.param(s, a), g.param(s, b), g.param(s, m));
            let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
            let add = g.add(an, bn)?;
            let sub = g.sub(an, bn)?;
            let mul = g.mul(add, sub)?;
            let sc = g.scale(mul, 0.7)?;
            let off = g.offset(sc, 0.1)?;
            let sg = g.sigmoid(off)?;
            let th = g.tanh(an)?;
            let rl = g.relu(bn)?;
            let mv = g.matvec(mn, th)?;
            let sm = g.softmax(mv)?;
            let r1 = g.row(mn, 1)?;
            let parts = [sg, rl, r1];
            let ws = g.weighted_sum(sm, &parts)?;
            let dr = g.dropout(ws, 0.8, true, &mut drop_rng)?;
            let cat = g.concat(&[dr, an])?;
            let sl = g.slice(cat, 3, 4)?;
            let cs = g.cosine(an, mul)?;
            let mx = g.max(sl)?;
            let se = g.sum_elems(sl)?;
            let d = g.dot(sg, th)?;
            g.sum(&[cs, mx, se, d])
        };
        let (err, name) = grad_check_all(&store, DEFAULT_STEP, build).unwrap();
        assert!(err <= 1e-4, "{err} at {name:?}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
    }
}
