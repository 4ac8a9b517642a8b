//! Scalar objectives: supervised segmentation and edge cross-entropies, the
//! discriminator loss, the generator-side adversarial term, per-pixel
//! self-entropy, and their per-network combinations.
//!
//! Discriminators use the convention source = 1, target = 0.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LOG_EPS};

/// Weights of the adversarial and entropy terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Edge-map adversarial weight in the contour-net objective.
    pub alpha: f64,
    /// Feature adversarial weight in the encoder objective.
    pub beta: f64,
    /// Entropy weight in the encoder and decoder objectives.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            lambda: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the generator side of an adversarial pair is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    /// Minimise `-log D(target)`.
    #[default]
    NonSaturating,
    /// Minimise `log(1 - D(target))`, i.e. maximise the discriminator's loss
    /// on target samples directly.
    Minimax,
}

/// Mean over pixels of `-log softmax(logits)[label]`.
///
/// `labels` holds one class index per pixel in `N,H,W` order.
pub fn seg_ce(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let [n, c, h, w] = tape.value(logits).dims4("seg_ce")?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::shape("seg_ce", format!("{} labels for {n}x{h}x{w} logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let mut one_hot = vec![0.0; n * c * plane];
    for b in 0..n {
        for p in 0..plane {
            one_hot[(b * c + labels[b * plane + p] as usize) * plane + p] = 1.0;
        }
    }
    let mask = tape.constant(Tensor::new(vec![n, c, h, w], one_hot)?);
    let log_probs = tape.log_softmax_channels(logits)?;
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / (n * plane) as f64)
}

/// Mean binary cross-entropy of edge probabilities against a 0/1 edge map of
/// the same shape.
pub fn edge_ce(tape: &mut Tape, edge_prob: Var, edge_label: &Tensor) -> Result<Var> {
    if tape.value(edge_prob).shape() != edge_label.shape() {
        return Err(Error::shape(
            "edge_ce",
            format!("{:?} vs {:?}", tape.value(edge_prob).shape(), edge_label.shape()),
        ));
    }
    if edge_label.data().iter().any(|&e| e != 0.0 && e != 1.0) {
        return Err(Error::InvalidArgument("edge labels must be binary".into()));
    }
    let n = edge_label.len() as f64;
    let complement = Tensor::new(edge_label.shape().to_vec(), edge_label.data().iter().map(|e| 1.0 - e).collect())?;
    let e = tape.constant(edge_label.clone());
    let not_e = tape.constant(complement);

    let p = tape.clamp(edge_prob, LOG_EPS, 1.0 - LOG_EPS)?;
    let log_p = tape.log(p)?;
    let one_minus = tape.affine(p, -1.0, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let pos = tape.mul(e, log_p)?;
    let neg = tape.mul(not_e, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0 / n)
}

/// Discriminator loss: `mean(-log s(l_s)) + mean(-log(1 - s(l_t)))`.
pub fn disc_bce(tape: &mut Tape, logit_source: Var, logit_target: Var) -> Result<Var> {
    let neg_s = tape.scale(logit_source, -1.0)?;
    let source_term = tape.softplus(neg_s)?;
    let source_term = tape.mean(source_term)?;
    let target_term = tape.softplus(logit_target)?;
    let target_term = tape.mean(target_term)?;
    tape.add(source_term, target_term)
}

/// Generator-side term: minimising it pushes the discriminator's target
/// outputs towards the source label.
pub fn adversarial_generator_term(tape: &mut Tape, logit_target: Var, form: AdversarialForm) -> Result<Var> {
    match form {
        AdversarialForm::NonSaturating => {
            let neg = tape.scale(logit_target, -1.0)?;
            let sp = tape.softplus(neg)?;
            tape.mean(sp)
        }
        AdversarialForm::Minimax => {
            let sp = tape.softplus(logit_target)?;
            let m = tape.mean(sp)?;
            tape.scale(m, -1.0)
        }
    }
}

/// Mean over pixels of the Shannon entropy of a per-pixel class distribution.
pub fn self_entropy(tape: &mut Tape, softmax_out: Var) -> Result<Var> {
    let [n, _, h, w] = tape.value(softmax_out).dims4("self_entropy")?;
    let clamped = tape.clamp(softmax_out, LOG_EPS, 1.0)?;
    let logs = tape.log(clamped)?;
    let plogp = tape.mul(softmax_out, logs)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / (n * h * w) as f64)
}

/// Individual loss terms of one training batch. Terms that an ablation does
/// not compute are `None` and contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveTerms {
    pub edge_ce: Option<Var>,
    pub edge_adv: Option<Var>,
    pub seg_ce: Option<Var>,
    pub feat_adv: Option<Var>,
    pub entropy: Option<Var>,
}

/// Objectives of the three task networks.
#[derive(Clone, Copy, Debug)]
pub struct TaskObjectives {
    pub contour: Option<Var>,
    pub encoder: Var,
    pub decoder: Var,
}

fn weighted_sum(tape: &mut Tape, base: Var, extra: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut acc = base;
    for &(weight, term) in extra {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight)?;
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

/// Contour: `edge_ce + alpha * edge_adv`. Encoder: `seg_ce + beta * feat_adv +
/// lambda * entropy`. Decoder: `seg_ce + lambda * entropy`.
///
/// The discriminator objectives are plain [`disc_bce`] values and are not
/// combined here.
pub fn composite_objectives(tape: &mut Tape, terms: &ObjectiveTerms, weights: &LossWeights) -> Result<TaskObjectives> {
    weights.validate()?;
    let seg = terms
        .seg_ce
        .ok_or_else(|| Error::InvalidArgument("segmentation cross-entropy term is required".into()))?;
    let contour = match terms.edge_ce {
        Some(ce) => Some(weighted_sum(tape, ce, &[(weights.alpha, terms.edge_adv)])?),
        None if terms.edge_adv.is_some() => {
            return Err(Error::InvalidArgument("edge adversarial term without edge cross-entropy".into()))
        }
        None => None,
    };
    let encoder = weighted_sum(tape, seg, &[(weights.beta, terms.feat_adv), (weights.lambda, terms.entropy)])?;
    let decoder = weighted_sum(tape, seg, &[(weights.lambda, terms.entropy)])?;
    Ok(TaskObjectives { contour, encoder, decoder })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::nets::{feat_disc_forward, Arch, ArchSpec, NetworkParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn seg_ce_cases() {
        let mut tape = Tape::new();
        let labels = [0u8, 1, 2, 3];
        let mut logits = vec![0.0; 16];
        for (p, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + p] = 100.0;
        }
        let x = tape.constant(t(&[1, 4, 2, 2], logits));
        let v = seg_ce(&mut tape, x, &labels).unwrap();
        assert!(scalar(&tape, v).abs() < 1e-12);

        let z = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
        let v = seg_ce(&mut tape, z, &labels).unwrap();
        assert!((scalar(&tape, v) - 4f64.ln()).abs() < 1e-12);

        assert!(seg_ce(&mut tape, z, &[0, 1, 2, 4]).is_err());
        assert!(seg_ce(&mut tape, z, &[0, 1, 2]).is_err());
    }

    #[test]
    fn seg_ce_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c, hw) = (2, 4, 9);
        let x = random_tensor(vec![n, c, 3, 3], -5.0, 5.0, &mut rng);
        let labels: Vec<u8> = (0..n * hw).map(|_| rng.random_range(0..c as u8)).collect();
        let mut expected = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let z: Vec<f64> = (0..c).map(|k| x.data()[(b * c + k) * hw + p]).collect();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                expected -= (z[labels[b * hw + p] as usize].exp() / denom).ln();
            }
        }
        expected /= (n * hw) as f64;
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let loss = seg_ce(&mut tape, v, &labels).unwrap();
        assert!((scalar(&tape, loss) - expected).abs() < 1e-10);
    }

    #[test]
    fn seg_ce_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[1, 3, 1, 1], vec![margin, 0.0, 0.0]));
            let v = seg_ce(&mut tape, x, &[0]).unwrap();
            let loss = scalar(&tape, v);
            assert!(loss < prev && loss >= 0.0);
            prev = loss;
        }
    }

    #[test]
    fn edge_ce_cases() {
        let mut tape = Tape::new();
        let labels = t(&[1, 1, 2, 2], vec![1., 0., 1., 0.]);
        let half = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let v = edge_ce(&mut tape, half, &labels).unwrap();
        assert!((scalar(&tape, v) - 2f64.ln()).abs() < 1e-12);

        let exact = tape.constant(labels.clone());
        let v = edge_ce(&mut tape, exact, &labels).unwrap();
        assert!(scalar(&tape, v) < 1e-11);

        let p = tape.constant(t(&[1, 1, 1, 1], vec![0.25]));
        let v = edge_ce(&mut tape, p, &t(&[1, 1, 1, 1], vec![1.0])).unwrap();
        assert!((scalar(&tape, v) + 0.25f64.ln()).abs() < 1e-12);

        assert!(edge_ce(&mut tape, half, &t(&[1, 1, 2, 2], vec![0.5, 0., 1., 0.])).is_err());
    }

    #[test]
    fn disc_bce_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 1]));
        let v = disc_bce(&mut tape, z, z).unwrap();
        assert!((scalar(&tape, v) - 2.0 * 2f64.ln()).abs() < 1e-12);

        let s = tape.constant(Tensor::full(vec![2, 1], 50.0));
        let tg = tape.constant(Tensor::full(vec![2, 1], -50.0));
        let v = disc_bce(&mut tape, s, tg).unwrap();
        assert!(scalar(&tape, v) < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ls = random_tensor(vec![5, 1], -6.0, 6.0, &mut rng);
        let lt = random_tensor(vec![3, 1], -6.0, 6.0, &mut rng);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = -ls.data().iter().map(|&x| sig(x).ln()).sum::<f64>() / 5.0
            - lt.data().iter().map(|&x| (1.0 - sig(x)).ln()).sum::<f64>() / 3.0;
        let (a, b) = (tape.constant(ls), tape.constant(lt));
        let v = disc_bce(&mut tape, a, b).unwrap();
        assert!((scalar(&tape, v) - expected).abs() < 1e-10);
    }

    #[test]
    fn generator_term_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![1, 1]));
        let v = adversarial_generator_term(&mut tape, z, AdversarialForm::NonSaturating).unwrap();
        assert!((scalar(&tape, v) - 2f64.ln()).abs() < 1e-12);
        let big = tape.constant(Tensor::full(vec![1, 1], 50.0));
        let v = adversarial_generator_term(&mut tape, big, AdversarialForm::NonSaturating).unwrap();
        assert!(scalar(&tape, v) < 1e-20);

        for form in [AdversarialForm::NonSaturating, AdversarialForm::Minimax] {
            let mut prev = f64::INFINITY;
            for i in -40..=40 {
                let l = tape.constant(Tensor::full(vec![1, 1], i as f64 * 0.25));
                let v = adversarial_generator_term(&mut tape, l, form).unwrap();
                let val = scalar(&tape, v);
                assert!(val < prev, "{form:?} not decreasing at {i}");
                prev = val;
            }
        }
    }

    #[test]
    fn entropy_cases() {
        let mut tape = Tape::new();
        let mut one_hot = vec![0.0; 16];
        for p in 0..4 {
            one_hot[(p % 4) * 4 + p] = 1.0;
        }
        let oh = tape.constant(t(&[1, 4, 2, 2], one_hot));
        let v = self_entropy(&mut tape, oh).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);

        let uni = tape.constant(Tensor::full(vec![2, 4, 2, 2], 0.25));
        let v = self_entropy(&mut tape, uni).unwrap();
        assert!((scalar(&tape, v) - 4f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_tensor(vec![2, 3, 2, 2], -3.0, 3.0, &mut rng);
        let lv = tape.constant(logits.clone());
        let s = tape.softmax_channels(lv).unwrap();
        let probs = tape.value(s).data().to_vec();
        let mut expected = 0.0;
        for b in 0..2 {
            for p in 0..4 {
                for c in 0..3 {
                    let q = probs[(b * 3 + c) * 4 + p];
                    expected -= q * q.ln();
                }
            }
        }
        expected /= 8.0;
        let v = self_entropy(&mut tape, s).unwrap();
        let got = scalar(&tape, v);
        assert!((got - expected).abs() < 1e-10);
        assert!(got >= 0.0 && got <= 3f64.ln());
    }

    #[test]
    fn composite_matches_hand_sums() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: f64| tape.constant(Tensor::scalar(v));
        let terms = ObjectiveTerms {
            edge_ce: Some(mk(&mut tape, 0.7)),
            edge_adv: Some(mk(&mut tape, 1.3)),
            seg_ce: Some(mk(&mut tape, 2.1)),
            feat_adv: Some(mk(&mut tape, 0.9)),
            entropy: Some(mk(&mut tape, 0.4)),
        };
        let w = LossWeights {
            alpha: 0.3,
            beta: 0.05,
            lambda: 0.2,
        };
        let o = composite_objectives(&mut tape, &terms, &w).unwrap();
        assert!((scalar(&tape, o.contour.unwrap()) - (0.7 + 0.3 * 1.3)).abs() < 1e-12);
        assert!((scalar(&tape, o.encoder) - (2.1 + 0.05 * 0.9 + 0.2 * 0.4)).abs() < 1e-12);
        assert!((scalar(&tape, o.decoder) - (2.1 + 0.2 * 0.4)).abs() < 1e-12);

        let o = composite_objectives(&mut tape, &terms, &LossWeights::zero()).unwrap();
        assert_eq!(scalar(&tape, o.contour.unwrap()), 0.7);
        assert_eq!(scalar(&tape, o.encoder), 2.1);
        assert_eq!(scalar(&tape, o.decoder), 2.1);

        let no_seg = ObjectiveTerms { seg_ce: None, ..terms };
        assert!(composite_objectives(&mut tape, &no_seg, &w).is_err());
        let bad = LossWeights { alpha: -1.0, ..w };
        assert!(composite_objectives(&mut tape, &terms, &bad).is_err());
    }

    #[test]
    fn confident_predictions_add_no_entropy() {
        let mut tape = Tape::new();
        let mut probs = vec![0.0; 8];
        probs[0] = 1.0;
        probs[5] = 1.0;
        let s = tape.constant(t(&[1, 4, 1, 2], probs));
        let ent = self_entropy(&mut tape, s).unwrap();
        let seg = tape.constant(Tensor::scalar(1.5));
        let terms = ObjectiveTerms {
            seg_ce: Some(seg),
            entropy: Some(ent),
            ..Default::default()
        };
        let o = composite_objectives(&mut tape, &terms, &LossWeights { lambda: 0.5, ..LossWeights::zero() }).unwrap();
        assert_eq!(scalar(&tape, o.decoder), 1.5);
    }

    /// One descent step on the discriminator loss lowers it; one descent step
    /// of the generator term (discriminator frozen) raises it.
    #[test]
    fn discriminator_and_generator_oppose() {
        let spec = ArchSpec {
            encoder_widths: [4, 4, 6],
            feat_disc_widths: [4, 4, 4],
            disc_hidden: 6,
            ..ArchSpec::default()
        };
        let mut disc = NetworkParams::init(Arch::FeatDisc, &spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fs = random_tensor(vec![4, 6, 4, 4], 0.0, 1.0, &mut rng);
        let mut ft = random_tensor(vec![4, 6, 4, 4], 0.0, 2.0, &mut rng);

        let disc_loss = |disc: &NetworkParams, ft: &Tensor| {
            let mut tape = Tape::new();
            let p = disc.bind(&mut tape, false);
            let (a, b) = (tape.constant(fs.clone()), tape.constant(ft.clone()));
            let ls = feat_disc_forward(&mut tape, &p, &spec, a).unwrap();
            let lt = feat_disc_forward(&mut tape, &p, &spec, b).unwrap();
            let l = disc_bce(&mut tape, ls, lt).unwrap();
            scalar(&tape, l)
        };

        let before = disc_loss(&disc, &ft);
        {
            let mut tape = Tape::new();
            let p = disc.bind(&mut tape, true);
            let (a, b) = (tape.constant(fs.clone()), tape.constant(ft.clone()));
            let ls = feat_disc_forward(&mut tape, &p, &spec, a).unwrap();
            let lt = feat_disc_forward(&mut tape, &p, &spec, b).unwrap();
            let l = disc_bce(&mut tape, ls, lt).unwrap();
            tape.backward(l).unwrap();
            let grads = p.grads(&tape);
            for ((_, t), g) in disc.tensors_mut().zip(grads) {
                t.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= 0.05 * g);
            }
        }
        let after_disc = disc_loss(&disc, &ft);
        assert!(after_disc < before, "{after_disc} !< {before}");

        {
            let mut tape = Tape::new();
            let p = disc.bind(&mut tape, false);
            let b = tape.param(ft.clone());
            let lt = feat_disc_forward(&mut tape, &p, &spec, b).unwrap();
            let g = adversarial_generator_term(&mut tape, lt, AdversarialForm::NonSaturating).unwrap();
            tape.backward(g).unwrap();
            for (p, pv) in p.vars() {
                assert!(tape.grad(pv).is_none(), "{p} received gradient");
            }
            let grad = tape.grad(b).unwrap().to_vec();
            ft.data_mut().iter_mut().zip(grad).for_each(|(x, g)| *x -= 0.5 * g);
        }
        let after_gen = disc_loss(&disc, &ft);
        assert!(after_gen > after_disc, "{after_gen} !> {after_disc}");
    }
}
