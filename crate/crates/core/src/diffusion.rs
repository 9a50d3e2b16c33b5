//! Forward process, prediction parameterizations, the denoiser interface,
//! the training loss and the optimizer.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::schedule::{alpha_sigma, NoiseSchedule};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredKind {
    Epsilon,
    X,
    V,
}

impl PredKind {
    pub fn name(self) -> &'static str {
        match self {
            PredKind::Epsilon => "epsilon",
            PredKind::X => "x",
            PredKind::V => "v",
        }
    }

    pub fn parse(s: &str) -> Result<PredKind> {
        match s {
            "epsilon" | "eps" => Ok(PredKind::Epsilon),
            "x" => Ok(PredKind::X),
            "v" => Ok(PredKind::V),
            _ => Err(Error::Config(format!("unknown prediction kind '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredKind,
    pub value: Tensor,
}

impl Prediction {
    pub fn new(kind: PredKind, value: Tensor) -> Self {
        Prediction { kind, value }
    }

    /// Re-express at `(z, λ)` as another kind.
    pub fn to_kind(&self, kind: PredKind, z: &Tensor, lambda: f64) -> Result<Prediction> {
        if self.value.dims() != z.dims() {
            return Err(shape_err!(
                "prediction {:?} vs z {:?}",
                self.value.dims(),
                z.dims()
            ));
        }
        if kind == self.kind {
            return Ok(self.clone());
        }
        let (a, s) = alpha_sigma(lambda);
        let p = &self.value;
        // each branch is the direct two-term formula, so every pair is exact
        let value = match (self.kind, kind) {
            // x = (z - σ ε) / α
            (PredKind::Epsilon, PredKind::X) => z.lincomb(1.0 / a, p, -s / a)?,
            // v = α ε - σ x = (ε - σ z) / α
            (PredKind::Epsilon, PredKind::V) => p.lincomb(1.0 / a, z, -s / a)?,
            // ε = (z - α x) / σ
            (PredKind::X, PredKind::Epsilon) => z.lincomb(1.0 / s, p, -a / s)?,
            // v = (α z - x) / σ
            (PredKind::X, PredKind::V) => z.lincomb(a / s, p, -1.0 / s)?,
            // ε = σ z + α v
            (PredKind::V, PredKind::Epsilon) => z.lincomb(s, p, a)?,
            // x = α z - σ v
            (PredKind::V, PredKind::X) => z.lincomb(a, p, -s)?,
            _ => unreachable!(),
        };
        Ok(Prediction { kind, value })
    }

    pub fn eps(&self, z: &Tensor, lambda: f64) -> Result<Tensor> {
        Ok(self.to_kind(PredKind::Epsilon, z, lambda)?.value)
    }

    pub fn x(&self, z: &Tensor, lambda: f64) -> Result<Tensor> {
        Ok(self.to_kind(PredKind::X, z, lambda)?.value)
    }
}

/// Conditioning for one video: optional class label (absent means the
/// zero embedding), and the per-frame image flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub label: Option<usize>,
    pub frame_mask: Vec<bool>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn label(label: usize) -> Self {
        Conditioning {
            label: Some(label),
            frame_mask: Vec::new(),
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.frame_mask = mask;
        self
    }

    pub fn unconditional(&self) -> Self {
        Conditioning {
            label: None,
            frame_mask: self.frame_mask.clone(),
        }
    }
}

/// Split of frame indices into conditioning frames `a` and generated frames `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePartition {
    pub frames: usize,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl FramePartition {
    pub fn new(frames: usize, a: &[usize]) -> Result<Self> {
        let mut a = a.to_vec();
        a.sort_unstable();
        a.dedup();
        if let Some(&f) = a.iter().find(|&&f| f >= frames) {
            return Err(shape_err!("frame {f} out of range for {frames} frames"));
        }
        let b = (0..frames).filter(|f| a.binary_search(f).is_err()).collect();
        Ok(FramePartition { frames, a, b })
    }

    pub fn unconditional(frames: usize) -> Self {
        FramePartition {
            frames,
            a: Vec::new(),
            b: (0..frames).collect(),
        }
    }

    pub fn is_a(&self, f: usize) -> bool {
        self.a.binary_search(&f).is_ok()
    }
}

/// A model of `E[x | z_t]` in some parameterization.
pub trait Denoiser {
    fn kind(&self) -> PredKind;

    /// `[F, H, W, C]` the model accepts.
    fn dims(&self) -> [usize; 4];

    fn predict(&self, z: &Tensor, lambda: f64, cond: &Conditioning) -> Result<Prediction>;

    /// Native prediction and `Jᵀ cot`, where `J` is the Jacobian of the
    /// native prediction with respect to `z`.
    fn vjp(
        &self,
        _z: &Tensor,
        _lambda: f64,
        _cond: &Conditioning,
        _cot: &Tensor,
    ) -> Result<(Prediction, Tensor)> {
        Err(Error::Usage("model provides no input gradient".into()))
    }
}

/// `x̂(z)` together with `(∂x̂/∂z)ᵀ cot`.
pub fn x_hat_vjp(
    model: &dyn Denoiser,
    z: &Tensor,
    lambda: f64,
    cond: &Conditioning,
    cot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (a, s) = alpha_sigma(lambda);
    let (pred, jt) = model.vjp(z, lambda, cond, cot)?;
    let x = pred.x(z, lambda)?;
    let grad = match pred.kind {
        PredKind::X => jt,
        PredKind::Epsilon => cot.lincomb(1.0 / a, &jt, -s / a)?,
        PredKind::V => cot.lincomb(a, &jt, -s)?,
    };
    Ok((x, grad))
}

/// `z_t = α_t x + σ_t ε`.
pub fn forward_sample<T: Real>(
    schedule: &NoiseSchedule,
    x: &Tensor<T>,
    t: f64,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ev = schedule.eval(t)?;
    x.lincomb(T::of(ev.alpha), noise, T::of(ev.sigma))
}

/// A model that can be placed on a gradient tape for training.
pub trait Trainable<T: Real> {
    fn kind(&self) -> PredKind;

    fn forward(
        &self,
        g: &Graph<T>,
        params: &ParamMap<T>,
        z: Var,
        lambda: f64,
        cond: &Conditioning,
    ) -> Result<Var>;
}

pub type ParamMap<T = f64> = BTreeMap<String, Tensor<T>>;

/// One training example set; every video has the same dims.
#[derive(Clone, Debug)]
pub struct Batch {
    pub videos: Vec<Tensor>,
    pub labels: Vec<Option<usize>>,
    pub frame_mask: Vec<bool>,
}

/// Mean squared error over all elements of the batch between the target
/// (ε or v, matching `model.kind()`) and the model output.  Draws `t`
/// uniformly per example, then the noise.
pub fn training_loss<T: Real, M: Trainable<T> + ?Sized>(
    model: &M,
    g: &Graph<T>,
    params: &ParamMap<T>,
    schedule: &NoiseSchedule,
    batch: &Batch,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.videos.is_empty() || batch.labels.len() != batch.videos.len() {
        return Err(shape_err!(
            "batch has {} videos and {} labels",
            batch.videos.len(),
            batch.labels.len()
        ));
    }
    let kind = model.kind();
    if kind == PredKind::X {
        return Err(Error::Config("training target must be epsilon or v".into()));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (x, label) in batch.videos.iter().zip(&batch.labels) {
        let t: f64 = rng.random::<f64>();
        let ev = schedule.eval(t)?;
        let eps = Tensor::new(x.dims().to_vec(), normal_vec(rng, x.len()))?;
        let z = x.lincomb(ev.alpha, &eps, ev.sigma)?;
        let target = match kind {
            PredKind::Epsilon => eps,
            _ => eps.lincomb(ev.alpha, x, -ev.sigma)?,
        };
        let cond = Conditioning {
            label: *label,
            frame_mask: batch.frame_mask.clone(),
        };
        let zv = g.constant(z.cast());
        let out = model.forward(g, params, zv, ev.lambda, &cond)?;
        let tv = g.constant(target.cast());
        let d = g.sub(out, tv)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
        count += x.len();
    }
    let loss = g.mul_scalar(total.unwrap(), T::of(1.0 / count as f64));
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {:?} over {} videos",
            v.f64(),
            batch.videos.len()
        )));
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Real = f32> {
    pub params: ParamMap<T>,
    pub ema: ParamMap<T>,
    pub adam_m: ParamMap<T>,
    pub adam_v: ParamMap<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParamMap<T>) -> Self {
        let zeros: ParamMap<T> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
            .collect();
        TrainState {
            ema: params.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
        }
    }

    /// Adam with decoupled weight decay, then the EMA update.
    pub fn apply_gradients(
        &mut self,
        grads: &BTreeMap<String, Tensor<T>>,
        opt: &AdamConfig,
        ema_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for '{name}'")));
            }
        }
        let step = self.step + 1;
        let bc1 = 1.0 - opt.beta1.powi(step as i32);
        let bc2 = 1.0 - opt.beta2.powi(step as i32);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name);
            let m = self.adam_m.get_mut(name).unwrap();
            let v = self.adam_v.get_mut(name).unwrap();
            let (mut pd, mut md, mut vd) = (p.to_vec(), m.to_vec(), v.to_vec());
            for i in 0..pd.len() {
                let gi = g.map(|g| g.data()[i].f64()).unwrap_or(0.0);
                let mi = opt.beta1 * md[i].f64() + (1.0 - opt.beta1) * gi;
                let vi = opt.beta2 * vd[i].f64() + (1.0 - opt.beta2) * gi * gi;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + opt.eps);
                let pi = pd[i].f64();
                pd[i] = T::of(pi - opt.lr * (upd + opt.weight_decay * pi));
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
            }
            let dims = p.dims().to_vec();
            *p = Tensor::from_parts(dims.clone(), pd);
            *m = Tensor::from_parts(dims.clone(), md);
            *v = Tensor::from_parts(dims, vd);
        }
        ema_update(&mut self.ema, &self.params, ema_decay);
        self.step = step;
        Ok(())
    }
}

/// `ema ← d·ema + (1−d)·params`.
pub fn ema_update<T: Real>(ema: &mut ParamMap<T>, params: &ParamMap<T>, decay: f64) {
    for (name, e) in ema.iter_mut() {
        let p = &params[name];
        let d = T::of(decay);
        *e = e.lincomb(d, p, T::one() - d).expect("ema and params share dims");
    }
}

/// One optimizer step: loss, backward, Adam, EMA.  Returns the loss.
pub fn train_step<T: Real, M: Trainable<T> + ?Sized>(
    model: &M,
    state: &mut TrainState<T>,
    schedule: &NoiseSchedule,
    batch: &Batch,
    opt: &AdamConfig,
    ema_decay: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let g = Graph::new();
    let loss = training_loss(model, &g, &state.params, schedule, batch, rng)
        .map_err(|e| e.at_step(state.step as usize))?;
    let value = g.value(loss).item().f64();
    let grads = g.backward(loss, &Tensor::scalar(T::one()))?;
    let named: BTreeMap<String, Tensor<T>> = grads.named().into_iter().collect();
    state
        .apply_gradients(&named, opt, ema_decay)
        .map_err(|e| e.at_step(state.step as usize))?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn exact_eps_recovers_x() {
        let lambda = 1.3;
        let (a, s) = alpha_sigma(lambda);
        let x = t(&[0.2, -0.7, 0.9]);
        let z = t(&[0.5, 0.1, -1.2]);
        let eps = z.lincomb(1.0 / s, &x, -a / s).unwrap();
        let xh = Prediction::new(PredKind::Epsilon, eps).x(&z, lambda).unwrap();
        assert!(xh.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn v_at_zero_lambda() {
        let z = t(&[0.3, -0.4]);
        let eps = Prediction::new(PredKind::Epsilon, t(&[1.0, 2.0]));
        let x = eps.x(&z, 0.0).unwrap();
        let v = eps.to_kind(PredKind::V, &z, 0.0).unwrap().value;
        let want = eps.value.sub(&x).unwrap().scale(0.5f64.sqrt());
        assert!(v.max_abs_diff(&want) < 1e-14);
    }

    proptest! {
        #[test]
        fn conversions_round_trip(
            vals in prop::collection::vec(-3.0f64..3.0, 1..6),
            zs in prop::collection::vec(-3.0f64..3.0, 6),
            lambda in -10.0f64..10.0,
        ) {
            let n = vals.len();
            let z = t(&zs[..n]);
            for start in [PredKind::Epsilon, PredKind::X, PredKind::V] {
                let p = Prediction::new(start, t(&vals));
                for path in [[PredKind::Epsilon, PredKind::V, PredKind::X], [PredKind::X, PredKind::Epsilon, PredKind::V]] {
                    let mut q = p.clone();
                    for k in path {
                        q = q.to_kind(k, &z, lambda).unwrap();
                    }
                    let back = q.to_kind(start, &z, lambda).unwrap();
                    let scale = 1.0 + p.value.max_abs();
                    prop_assert!(back.value.max_abs_diff(&p.value) < 1e-12 * scale * (lambda.abs() / 2.0).exp());
                }
            }
        }
    }

    #[test]
    fn eps_v_eps_near_identity() {
        let z = t(&[0.1, 0.2, -0.3]);
        let p = Prediction::new(PredKind::Epsilon, t(&[1.0, -0.5, 0.25]));
        let back = p
            .to_kind(PredKind::V, &z, 2.0)
            .unwrap()
            .to_kind(PredKind::Epsilon, &z, 2.0)
            .unwrap();
        assert!(back.value.max_abs_diff(&p.value) < 1e-12);
    }

    #[test]
    fn forward_sample_endpoints() {
        let sc = NoiseSchedule::default();
        let x = t(&[0.5, -0.5, 1.0]);
        let n = t(&[1.0, 1.0, -1.0]);
        let z0 = forward_sample(&sc, &x, 0.0, &n).unwrap();
        let s0 = (1.0 / (1.0 + 20f64.exp())).sqrt();
        assert!(z0.max_abs_diff(&x) <= 1.0001 * s0);
        let z1 = forward_sample(&sc, &x, 1.0, &n).unwrap();
        assert!(z1.max_abs_diff(&n) <= 1.0001 * s0);
        assert!(forward_sample(&sc, &x, 0.5, &t(&[1.0])).is_err());
    }

    /// Output = p * z with scalar p, or a fixed tensor.
    struct Toy {
        kind: PredKind,
    }

    impl Trainable<f64> for Toy {
        fn kind(&self) -> PredKind {
            self.kind
        }
        fn forward(
            &self,
            g: &Graph<f64>,
            params: &ParamMap<f64>,
            z: Var,
            lambda: f64,
            _cond: &Conditioning,
        ) -> Result<Var> {
            let p = g.param("p", &params["p"]);
            let q = g.param("q", &params["q"]);
            let zl = g.mul(z, p)?;
            let lam = g.constant(Tensor::scalar(lambda.tanh()));
            let ql = g.mul(q, lam)?;
            g.add(zl, ql)
        }
    }

    fn toy_params(p: f64, q: f64) -> ParamMap<f64> {
        let mut m = ParamMap::new();
        m.insert("p".into(), Tensor::scalar(p));
        m.insert("q".into(), Tensor::scalar(q));
        m
    }

    fn batch(n: usize, dims: &[usize], seed: u64) -> Batch {
        let mut rng = rng_for(seed, "test-batch", 0);
        let len: usize = dims.iter().product();
        Batch {
            videos: (0..n)
                .map(|_| Tensor::new(dims.to_vec(), normal_vec(&mut rng, len)).unwrap().map(|v| v.tanh()))
                .collect(),
            labels: vec![None; n],
            frame_mask: Vec::new(),
        }
    }

    #[test]
    fn zero_output_loss_is_unit_per_element() {
        let sc = NoiseSchedule::default();
        let b = batch(100, &[2, 2, 2, 1], 1);
        let mut rng = rng_for(3, "loss", 0);
        let params = toy_params(0.0, 0.0);
        let mut acc = 0.0;
        let reps = 100;
        for _ in 0..reps {
            let g = Graph::new();
            let l = training_loss(&Toy { kind: PredKind::Epsilon }, &g, &params, &sc, &b, &mut rng).unwrap();
            acc += g.value(l).item();
        }
        // per element ≈ 1, so the per-example squared norm ≈ D
        let per_example = acc / reps as f64 * 8.0;
        assert!((per_example - 8.0).abs() < 0.4, "{per_example}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let sc = NoiseSchedule::default();
        let b = batch(3, &[2, 2, 1, 1], 2);
        for kind in [PredKind::Epsilon, PredKind::V] {
            let model = Toy { kind };
            let eval = |p: f64, q: f64| {
                let g = Graph::new();
                let mut rng = rng_for(9, "fd", 0);
                let l = training_loss(&model, &g, &toy_params(p, q), &sc, &b, &mut rng).unwrap();
                (g.value(l).item(), g.backward(l, &Tensor::scalar(1.0)).unwrap().named())
            };
            let (_, grads) = eval(0.3, -0.2);
            let h = 1e-5;
            let fd_p = (eval(0.3 + h, -0.2).0 - eval(0.3 - h, -0.2).0) / (2.0 * h);
            let fd_q = (eval(0.3, -0.2 + h).0 - eval(0.3, -0.2 - h).0) / (2.0 * h);
            let gp = grads[0].1.item();
            let gq = grads[1].1.item();
            assert!((gp - fd_p).abs() / fd_p.abs().max(1e-3) < 1e-5);
            assert!((gq - fd_q).abs() / fd_q.abs().max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn raw_target_model_gives_zero_loss() {
        // with x = 0 the true noise is z / σ
        struct Oracle;
        impl Trainable<f64> for Oracle {
            fn kind(&self) -> PredKind {
                PredKind::Epsilon
            }
            fn forward(&self, g: &Graph<f64>, _p: &ParamMap<f64>, z: Var, lambda: f64, _c: &Conditioning) -> Result<Var> {
                let (_, s) = alpha_sigma(lambda);
                Ok(g.mul_scalar(z, 1.0 / s))
            }
        }
        let sc = NoiseSchedule::default();
        let b = Batch {
            videos: vec![Tensor::zeros(&[2, 2, 2, 1]); 4],
            labels: vec![None; 4],
            frame_mask: Vec::new(),
        };
        let g = Graph::new();
        let mut rng = rng_for(5, "zero", 0);
        let l = training_loss(&Oracle, &g, &ParamMap::new(), &sc, &b, &mut rng).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        // with a constant-output model the noise draws do not depend on the video
        let sc = NoiseSchedule::default();
        let b = batch(5, &[2, 2, 1, 1], 4);
        let mut rev = b.clone();
        rev.videos.reverse();
        let params = toy_params(0.0, 0.7);
        let run = |b: &Batch| {
            let g = Graph::new();
            let mut rng = rng_for(1, "order", 0);
            let l = training_loss(&Toy { kind: PredKind::Epsilon }, &g, &params, &sc, b, &mut rng).unwrap();
            g.value(l).item()
        };
        assert!((run(&b) - run(&rev)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_and_moves_ema() {
        let mut st = TrainState::<f64>::new(toy_params(1.0, 2.0));
        st.ema.insert("p".into(), Tensor::scalar(0.0));
        let grads: BTreeMap<_, _> = [("p".to_string(), Tensor::scalar(0.0))].into();
        st.apply_gradients(&grads, &AdamConfig::default(), 0.9).unwrap();
        assert_eq!(st.params["p"].item(), 1.0);
        assert!((st.ema["p"].item() - 0.1).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_hand_trace_on_quadratic() {
        let mut st = TrainState::<f64>::new(toy_params(1.0, 0.0));
        let opt = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let grads: BTreeMap<_, _> = [("p".to_string(), Tensor::scalar(2.0))].into();
        st.apply_gradients(&grads, &opt, 0.9999).unwrap();
        // m̂ = 2, v̂ = 4, step = 0.1 * 2 / (2 + 1e-8)
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((st.params["p"].item() - want).abs() < 1e-15);
    }

    #[test]
    fn fixed_gradient_descends() {
        let mut st = TrainState::<f64>::new(toy_params(0.0, 0.0));
        let grads: BTreeMap<_, _> = [("p".to_string(), Tensor::scalar(-0.5))].into();
        for _ in 0..50 {
            st.apply_gradients(&grads, &AdamConfig::default(), 0.99).unwrap();
        }
        assert!(st.params["p"].item() > 0.04);
    }

    #[test]
    fn ema_geometric_convergence() {
        let params = toy_params(3.0, -1.0);
        let mut ema = toy_params(0.0, 0.0);
        let d = 0.95;
        for _ in 0..40 {
            ema_update(&mut ema, &params, d);
        }
        let want = d.powi(40) * 3.0;
        assert!(((3.0 - ema["p"].item()) - want).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut st = TrainState::<f64>::new(toy_params(0.0, 0.0));
        let grads: BTreeMap<_, _> = [("q".to_string(), Tensor::scalar(f64::NAN))].into();
        let e = st.apply_gradients(&grads, &AdamConfig::default(), 0.9).unwrap_err();
        assert!(e.to_string().contains("'q'"));
    }
}
