//! Batched computational graphs with graph-to-graph differentiation.
//!
//! Every node holds a matrix whose rows are independent points of a batch, so
//! one graph evaluates a network and all of its input derivatives for a whole
//! set of points at once. [`Graph::differentiate`] appends a derivative graph
//! that can be differentiated again; [`Graph::gradient`] runs reverse mode for
//! parameter gradients.

mod diff;
mod eval;
mod graph;
mod params;

pub use eval::Evaluation;
pub use graph::{Graph, Matrix, NodeId, Op};
pub use params::ParamSet;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn scalar(g: &Graph, n: NodeId) -> f64 {
        g.evaluate_scalar(n).unwrap()
    }

    #[test]
    fn evaluates_basic_expressions() {
        let mut g = Graph::new();
        let x = g.scalar_leaf("x", 3.0);
        let xx = g.mul(x, x);
        assert_eq!(scalar(&g, xx), 9.0);
        let five = g.scalar(5.0);
        assert_eq!(scalar(&g, five), 5.0);

        g.set_scalar(x, 0.0).unwrap();
        let one = g.scalar(1.0);
        let den = g.add(one, xx);
        let q = g.div(x, den);
        assert_eq!(scalar(&g, q), 0.0);
    }

    #[test]
    fn zero_denominator_names_the_node() {
        let mut g = Graph::new();
        let x = g.scalar_leaf("x", 0.0);
        let one = g.scalar(1.0);
        let q = g.div(one, x);
        g.set_name(q, "reciprocal");
        match g.evaluate(q) {
            Err(Error::Domain { node, .. }) => assert!(node.contains("reciprocal")),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn nested_derivatives() {
        let mut g = Graph::new();
        let x = g.scalar_leaf("x", 2.0);
        let x2 = g.mul(x, x);
        let y = g.mul(x2, x);
        let d1 = g.differentiate(y, x);
        let d2 = g.differentiate(d1, x);
        assert_eq!(scalar(&g, d1), 12.0);
        assert_eq!(scalar(&g, d2), 12.0);
        let d3 = g.differentiate(d2, x);
        let d4 = g.differentiate(d3, x);
        assert_eq!(scalar(&g, d3), 6.0);
        assert_eq!(scalar(&g, d4), 0.0);
    }

    #[test]
    fn quotient_rule_at_origin() {
        let mut g = Graph::new();
        let x = g.scalar_leaf("x", 0.0);
        let one = g.scalar(1.0);
        let xx = g.mul(x, x);
        let den = g.add(one, xx);
        let y = g.div(x, den);
        let d = g.differentiate(y, x);
        assert_eq!(scalar(&g, d), 1.0);
        // d²/dx² x/(1+x²) = (2x³ − 6x)/(1+x²)³, which is −0.5 at x = 1.
        g.set_scalar(x, 1.0).unwrap();
        let dd = g.differentiate(d, x);
        assert!((scalar(&g, dd) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixed_partial_of_product() {
        let mut g = Graph::new();
        let u = g.scalar_leaf("u", 0.7);
        let v = g.scalar_leaf("v", -3.2);
        let y = g.mul(u, v);
        let du = g.differentiate(y, u);
        let duv = g.differentiate(du, v);
        for (a, b) in [(0.7, -3.2), (11.0, 0.0), (-1e3, 2.5)] {
            g.set_scalar(u, a).unwrap();
            g.set_scalar(v, b).unwrap();
            assert_eq!(scalar(&g, duv), 1.0);
        }
    }

    #[test]
    fn unreachable_leaf_gives_constant_zero() {
        let mut g = Graph::new();
        let w = g.scalar_leaf("w", 1.0);
        let x = g.scalar_leaf("x", 2.0);
        let y = g.mul(x, x);
        let d = g.differentiate(y, w);
        assert_eq!(g.op(d), &Op::Constant);
        assert_eq!(scalar(&g, d), 0.0);
    }

    #[test]
    fn gradient_examples() {
        let mut g = Graph::new();
        let w = g.scalar_leaf("w", 0.4);
        let b = g.scalar_leaf("b", -1.0);
        let z = g.scalar_leaf("z", 9.0);
        let three = g.scalar(3.0);
        let tw = g.mul(three, w);
        let out = g.add(tw, b);
        let mut params = ParamSet::new();
        params.extend(&g, [w, b]).unwrap();
        assert_eq!(g.gradient(out, &params).unwrap(), vec![3.0, 1.0]);

        let mut with_z = ParamSet::new();
        with_z.extend(&g, [z, w]).unwrap();
        assert_eq!(g.gradient(out, &with_z).unwrap(), vec![0.0, 3.0]);

        assert!(g.gradient(out, &ParamSet::new()).unwrap().is_empty());
    }

    #[test]
    fn param_set_rejects_duplicates_and_non_leaves() {
        let mut g = Graph::new();
        let w = g.scalar_leaf("w", 1.0);
        let n = g.neg(w);
        let mut p = ParamSet::new();
        p.push(&g, w).unwrap();
        assert!(p.push(&g, w).is_err());
        assert!(p.push(&g, n).is_err());
        assert_eq!(p.leaves(), &[w]);
    }

    /// Batched input: derivative along one coordinate column.
    #[test]
    fn batched_coordinate_derivative() {
        let mut g = Graph::new();
        let x = g.leaf("X", array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let w = g.leaf("W", array![[2.0, -1.0], [0.5, 3.0]]);
        let b = g.leaf("b", array![[0.1, 0.2]]);
        let h = g.affine(x, w, Some(b));
        let h2 = g.mul(h, h);
        let v = g.leaf("v", array![[1.0, 1.0]]);
        let y = g.affine(h2, v, None);
        // y = Σ_j (W_j·x + b_j)^2; ∂y/∂x_1 = Σ_j 2 (W_j·x + b_j) W_j1
        let e1 = g.constant(array![[0.0, 1.0]]);
        let d = g.differentiate_along(y, x, e1).unwrap();
        let dv = g.evaluate(d).unwrap();
        let xs = g.stored_value(x).unwrap().clone();
        for r in 0..3 {
            let (x0, x1) = (xs[[r, 0]], xs[[r, 1]]);
            let h0 = 2.0 * x0 - x1 + 0.1;
            let h1 = 0.5 * x0 + 3.0 * x1 + 0.2;
            let expect = 2.0 * h0 * -1.0 + 2.0 * h1 * 3.0;
            assert!((dv[[r, 0]] - expect).abs() < 1e-12);
        }
    }

    /// Gradient of a batch-summed derivative against finite differences; the
    /// derivative subgraph depends on the weights through both the primal and
    /// the tangent path.
    #[test]
    fn gradient_of_derivative_matches_finite_differences() {
        let mut g = Graph::new();
        let x = g.leaf("X", array![[0.3], [-0.8], [1.1]]);
        let w = g.leaf("W", array![[0.7], [-1.2]]);
        let b = g.leaf("b", array![[0.2, -0.4]]);
        let c = g.scalar_leaf("c", 0.9);
        let h = g.affine(x, w, Some(b));
        let one = g.scalar(1.0);
        let h2 = g.mul(h, h);
        let den = g.add(one, h2);
        let cube = g.powi(h, 3);
        let num = g.mul(c, cube);
        let r = g.div(num, den);
        let v = g.leaf("v", array![[1.5, -0.5]]);
        let u = g.affine(r, v, None);
        let ux = g.differentiate(u, x);
        let uxx = g.differentiate(ux, x);
        let sq = g.mul(uxx, uxx);
        let loss = g.sum(sq);
        let mut params = ParamSet::new();
        params.extend(&g, [w, b, c, v]).unwrap();
        let grad = g.gradient(loss, &params).unwrap();
        let base = params.values(&g);
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            params.assign(&mut g, &p).unwrap();
            let fp = scalar(&g, loss);
            p[i] -= 2.0 * h;
            params.assign(&mut g, &p).unwrap();
            let fm = scalar(&g, loss);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "entry {i}: {} vs {fd}",
                grad[i]
            );
        }
        params.assign(&mut g, &base).unwrap();
    }

    #[test]
    fn deep_chain_does_not_overflow_the_stack() {
        let mut g = Graph::new();
        let x = g.scalar_leaf("x", 1.0);
        let mut y = x;
        let c = g.scalar(1e-6);
        for _ in 0..200_000 {
            let t = g.mul(y, c);
            y = g.add(y, t);
        }
        let d = g.differentiate(y, x);
        let v = scalar(&g, d);
        assert!((v - (1.0f64 + 1e-6).powi(200_000)).abs() < 1e-9);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf(
            "X",
            Array2::from_shape_fn((50, 1), |(i, _)| (i as f64).sin()),
        );
        let w = g.leaf(
            "W",
            Array2::from_shape_fn((8, 1), |(i, _)| 0.1 * i as f64 - 0.3),
        );
        let h = g.affine(x, w, None);
        let h3 = g.powi(h, 3);
        let s = g.sum(h3);
        let d = g.differentiate(s, w);
        let a = g.evaluate(d).unwrap();
        let b = g.evaluate(d).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn differentiation_is_linear(
            a in -5.0f64..5.0, b in -5.0f64..5.0, x0 in -2.0f64..2.0,
        ) {
            let mut g = Graph::new();
            let x = g.scalar_leaf("x", x0);
            // f = x³ + 2x, g = x/(2 + x²)
            let x3 = g.powi(x, 3);
            let two = g.scalar(2.0);
            let tx = g.mul(two, x);
            let f = g.add(x3, tx);
            let xx = g.mul(x, x);
            let den = g.add(two, xx);
            let h = g.div(x, den);
            let ca = g.scalar(a);
            let cb = g.scalar(b);
            let af = g.mul(ca, f);
            let bh = g.mul(cb, h);
            let combo = g.add(af, bh);
            let lhs = g.differentiate(combo, x);
            let fp = g.differentiate(f, x);
            let hp = g.differentiate(h, x);
            let l = g.evaluate_scalar(lhs).unwrap();
            let r = a * g.evaluate_scalar(fp).unwrap() + b * g.evaluate_scalar(hp).unwrap();
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }

        #[test]
        fn gradient_equals_differentiate_per_parameter(
            w0 in -2.0f64..2.0, w1 in -2.0f64..2.0, x0 in -1.0f64..1.0,
        ) {
            let mut g = Graph::new();
            let x = g.scalar_leaf("x", x0);
            let w = g.scalar_leaf("w", w0);
            let v = g.scalar_leaf("v", w1);
            let wx = g.mul(w, x);
            let one = g.scalar(1.0);
            let sq = g.mul(wx, wx);
            let den = g.add(one, sq);
            let r = g.div(wx, den);
            let out = g.mul(v, r);
            let mut params = ParamSet::new();
            params.extend(&g, [w, v]).unwrap();
            let grad = g.gradient(out, &params).unwrap();
            let dw = g.differentiate(out, w);
            let dv = g.differentiate(out, v);
            prop_assert!((grad[0] - g.evaluate_scalar(dw).unwrap()).abs() < 1e-14);
            prop_assert!((grad[1] - g.evaluate_scalar(dv).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn leaf_overrides_do_not_touch_stored_values() {
        let mut g = Graph::new();
        let x = g.leaf("X", array![[1.0], [2.0]]);
        let y = g.powi(x, 2);
        let other = array![[3.0], [4.0]];
        let e = g.forward(&[y], &[(x, &other)]).unwrap();
        assert_eq!(e.get(y).unwrap(), &array![[9.0], [16.0]]);
        assert_eq!(g.evaluate(y).unwrap(), array![[1.0], [4.0]]);
    }
}
