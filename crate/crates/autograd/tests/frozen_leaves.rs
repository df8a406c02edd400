//! Stop-gradient semantics: replaying frozen leaves turns finite differences
//! into the function reverse mode differentiates.

use docseg_autograd::gradcheck::{central_difference, relative_error};
use docseg_autograd::{Graph, ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use proptest::{prop_assert, proptest};

fn loss<'g>(g: &'g Graph<f64>) -> Tensor<'g, f64> {
    let x = g.param("x");
    let stopped = x.detach().square();
    let scale = g.constant(x.value().mapv(|v| v.sin()));
    (x * stopped + x.exp() * scale).sum_all()
}

fn params(v: &[f64]) -> ParamStore<f64> {
    let mut ps = ParamStore::new();
    ps.insert("x", ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap());
    ps
}

#[test]
fn replay_reproduces_the_base_value() {
    let ps = params(&[0.3, -0.7]);
    let g = Graph::new(&ps);
    let base = loss(&g).item();
    let leaves = g.frozen_leaves();
    assert_eq!(leaves.len(), 2);
    let r = Graph::replaying(&ps, leaves);
    assert_eq!(loss(&r).item(), base);
}

#[test]
#[should_panic(expected = "changed shape")]
fn replay_rejects_a_different_graph() {
    let g = Graph::new(&params(&[0.3, -0.7]));
    let _ = loss(&g);
    let r = Graph::replaying(&params(&[0.3, -0.7, 1.0]), g.frozen_leaves());
    let _ = loss(&r);
}

proptest! {
    #[test]
    fn replayed_differences_match_reverse_mode(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let ps = params(&[a, b]);
        let g = Graph::new(&ps);
        let l = loss(&g);
        let leaves = g.frozen_leaves();
        let grads = g.backward(l);
        let analytic = grads.param("x").unwrap().clone();
        for i in 0..2 {
            let numeric = central_difference(&ps, "x", i, 1e-5, |p| loss(&Graph::replaying(p, leaves.clone())).item());
            prop_assert!(relative_error(analytic[[i]], numeric) < 1e-7);
        }
        // free differences also see the stopped paths and disagree in general
        let free = central_difference(&ps, "x", 0, 1e-5, |p| loss(&Graph::inference(p)).item());
        let d_stopped = 2.0 * a * a + a.cos() * a.exp();
        prop_assert!((free - (analytic[[0]] + d_stopped)).abs() < 1e-5);
    }
}
