//! Loss terms: Wasserstein adversarial loss with gradient penalty, auxiliary
//! classification losses on real and translated images, the image-level and
//! feature-level cyclic consistency terms, and the weighted totals.
//!
//! Everything here is a pure function of graph nodes (or plain scalars for
//! the totals); the trainer decides which parameters each loss updates.

use crate::graph::{Graph, NodeId, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// All loss components of one step, as plain numbers for logging and for the
/// weighted-total arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub adv: Vec<f64>,
    pub cls_real: Vec<f64>,
    pub cls_fake: Vec<f64>,
    pub cyc_er: Option<f64>,
    pub cyc_t: Vec<f64>,
    pub gp: Vec<f64>,
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
}

impl LossBundle {
    /// `L_D = -sum_i adv_i + lambda_cls * sum_i cls_real_i`
    pub fn total_d(&self) -> f64 {
        -self.adv.iter().sum::<f64>() + self.lambda_cls * self.cls_real.iter().sum::<f64>()
    }

    /// `L_G = sum_i adv_i + lambda_cls * sum_i cls_fake_i
    ///        + lambda_cyc * (cyc_er + sum_i cyc_t_i)`
    pub fn total_g(&self) -> f64 {
        let cyc = self.cyc_er.unwrap_or(0.0) + self.cyc_t.iter().sum::<f64>();
        self.adv.iter().sum::<f64>()
            + self.lambda_cls * self.cls_fake.iter().sum::<f64>()
            + self.lambda_cyc * cyc
    }

    pub fn all_finite(&self) -> bool {
        self.adv
            .iter()
            .chain(&self.cls_real)
            .chain(&self.cls_fake)
            .chain(self.cyc_er.iter())
            .chain(&self.cyc_t)
            .chain(&self.gp)
            .all(|v| v.is_finite())
            && self.total_d().is_finite()
            && self.total_g().is_finite()
    }
}

/// Mean of a critic's realism map per sample, then over the batch: the
/// expectation terms of the Wasserstein objective.
pub fn critic_score<S: Scalar>(g: &mut Graph<S>, realism: NodeId) -> NodeId {
    g.mean_all(realism)
}

/// `E[D(real)] - E[D(fake)]` from two realism maps.
pub fn wasserstein_gap<S: Scalar>(g: &mut Graph<S>, real: NodeId, fake: NodeId) -> NodeId {
    let r = critic_score(g, real);
    let f = critic_score(g, fake);
    g.sub(r, f)
}

/// `x_hat = eps * real + (1 - eps) * fake`, one uniform eps per sample.
pub fn interpolate<S: Scalar, R: Rng>(real: &ArrayD<S>, fake: &ArrayD<S>, rng: &mut R) -> ArrayD<S> {
    assert_eq!(real.shape(), fake.shape(), "interpolate: shape mismatch");
    let n = real.shape()[0];
    let mut out = real.clone();
    for i in 0..n {
        let eps = S::from_f64(rng.gen::<f64>());
        let one_m = S::one() - eps;
        let mut slice = out.index_axis_mut(ndarray::Axis(0), i);
        let f = fake.index_axis(ndarray::Axis(0), i);
        slice.zip_mut_with(&f, |r, &fv| *r = *r * eps + fv * one_m);
    }
    out
}

/// Mean over the batch of `(||grad_x critic(x)||_2 - 1)^2`, where the critic's
/// spatial realism map is averaged to one scalar per sample before
/// differentiation. The returned node stays differentiable with respect to
/// the critic parameters (double backward).
pub fn gradient_penalty<S: Scalar, F>(g: &mut Graph<S>, critic: F, x_hat: ArrayD<S>) -> NodeId
where
    F: FnOnce(&mut Graph<S>, NodeId) -> NodeId,
{
    let n = x_hat.shape()[0];
    let numel_per_sample: usize = x_hat.len() / n;
    let x = g.leaf(x_hat, true);
    let realism = critic(g, x);
    // per-sample spatial mean, then a batch sum: the gradient of the sum
    // w.r.t. x carries each sample's own gradient
    let map_elems: usize = g.value(realism).len() / n;
    let summed = g.sum_all(realism);
    let per_sample = g.scale(summed, S::from_f64(1.0 / map_elems as f64));
    let grads = g.backward(per_sample);
    let gx = match grads.get(x) {
        Some(id) => id,
        None => {
            // constant critic: zero gradient, penalty (0 - 1)^2 = 1
            g.constant(ArrayD::zeros(IxDyn(&[n, numel_per_sample])))
        }
    };
    let flat = g.reshape(gx, &[n, numel_per_sample]);
    let sq = g.square(flat);
    let ssq = g.sum_axes(sq, &[1]);
    let norm = g.sqrt(ssq);
    let dev = g.add_scalar(norm, S::from_f64(-1.0));
    let dev2 = g.square(dev);
    g.mean_all(dev2)
}

/// `E[D(real)] - E[D(fake)] - lambda_gp * penalty` with the penalty evaluated
/// on a fresh interpolate of the two batches. Returns the loss node and the
/// penalty node (for logging and replay checks).
pub fn adversarial_loss<S: Scalar, F, R>(
    g: &mut Graph<S>,
    critic: F,
    real: &ArrayD<S>,
    fake: &ArrayD<S>,
    lambda_gp: f64,
    rng: &mut R,
) -> (NodeId, NodeId)
where
    F: Fn(&mut Graph<S>, NodeId) -> NodeId,
    R: Rng,
{
    assert_eq!(real.shape(), fake.shape(), "adversarial_loss: batch shape mismatch");
    let rn = g.constant(real.clone());
    let fn_ = g.constant(fake.clone());
    let d_real = critic(g, rn);
    let d_fake = critic(g, fn_);
    let gap = wasserstein_gap(g, d_real, d_fake);
    let x_hat = interpolate(real, fake, rng);
    let gp = gradient_penalty(g, &critic, x_hat);
    let weighted = g.scale(gp, S::from_f64(lambda_gp));
    let loss = g.sub(gap, weighted);
    (loss, gp)
}

/// Cross-entropy `-log softmax(logits)[label]`, averaged over the batch.
/// `target` is one-hot `[n, c]`.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: NodeId, target: &ArrayD<S>) -> NodeId {
    let shape = g.shape(logits).to_vec();
    assert_eq!(&shape, &target.shape().to_vec(), "cross_entropy: shape mismatch");
    let n = shape[0];
    // detached per-row max keeps exp in range without changing gradients
    let mut m = ArrayD::zeros(IxDyn(&[n, 1]));
    for i in 0..n {
        let row = g.value(logits).index_axis(ndarray::Axis(0), i);
        let mx = row.iter().cloned().fold(S::from_f64(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
        m[[i, 0]] = mx;
    }
    let m = g.constant(m);
    let mb = g.expand(m, &shape);
    let shifted = g.sub(logits, mb);
    let e = g.exp(shifted);
    let se = g.sum_axes(e, &[1]);
    let lse_part = g.ln(se);
    let lse = g.add(lse_part, m);
    let t = g.constant(target.clone());
    let picked_terms = g.mul(logits, t);
    let picked = g.sum_axes(picked_terms, &[1]);
    let per_sample = g.sub(lse, picked);
    g.mean_all(per_sample)
}

/// Eq. 2 form: classification loss of real images against their labels.
pub fn cls_real<S: Scalar>(g: &mut Graph<S>, logits: NodeId, label: &ArrayD<S>) -> NodeId {
    cross_entropy(g, logits, label)
}

/// Eq. 3 form: classification loss of translated images against the sampled
/// target attribute value.
pub fn cls_fake<S: Scalar>(g: &mut Graph<S>, logits: NodeId, target: &ArrayD<S>) -> NodeId {
    cross_entropy(g, logits, target)
}

/// Mean L1 distance normalized by element count. Used for both the
/// image-level E/R round trip and the feature-level transformer consistency.
pub fn l1_mean<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(g.shape(a), g.shape(b), "l1_mean: shape mismatch");
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean_all(ad)
}

/// `|| R(E(x)) - x ||_1 / numel`.
pub fn cyclic_er<S: Scalar>(g: &mut Graph<S>, x: NodeId, x_rec: NodeId) -> NodeId {
    l1_mean(g, x_rec, x)
}

/// `|| T_i(E(x)) - E(R(T_i(E(x)))) ||_1 / numel`.
pub fn cyclic_t<S: Scalar>(g: &mut Graph<S>, f_t: NodeId, f_reenc: NodeId) -> NodeId {
    l1_mean(g, f_t, f_reenc)
}
