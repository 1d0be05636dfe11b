//! Small convolutional noise predictor and its training loop.
//!
//! Four 3×3 convolutions with ReLU in between. The timestep goes through a
//! sinusoidal embedding and a dense layer, and the result is added per
//! channel to the first feature map.

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::layers::{sinusoidal_embedding, LayerKind};
use crate::numerics::{AdamHyper, AdamState, Array, Checkpoint, Layer, LayerSpec, Rng, Scalar, Sequential};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub channels: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            channels: 1,
            hidden: 16,
            time_embed_dim: 16,
        }
    }
}

impl DenoiserArch {
    /// Specs of the convolutional body, first conv included.
    pub fn body_specs(&self) -> Vec<LayerSpec> {
        let (c, h) = (self.channels, self.hidden);
        vec![
            LayerSpec::conv2d(c, h, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(h, h, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(h, h, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(h, c, 3, 1, 1),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T: Scalar = f32> {
    time_embed_dim: usize,
    time_dense: Layer<T>,
    first: Layer<T>,
    rest: Sequential<T>,
}

/// Per-parameter gradients in [`Denoiser::params`] order.
pub type DenoiserGrads<T> = Vec<Array<T>>;

impl<T: Scalar> Denoiser<T> {
    /// He-normal init with a zeroed output convolution, so an untrained
    /// model predicts zero noise.
    pub fn init(arch: DenoiserArch, rng: &mut Rng) -> Result<Self> {
        let specs = arch.body_specs();
        let time_dense = Layer::init(LayerSpec::dense(arch.time_embed_dim, arch.hidden), rng)?;
        let first = Layer::init(specs[0].clone(), rng)?;
        let mut rest = Sequential::init(&specs[1..], rng)?;
        let last = rest.layers_mut().last_mut().unwrap();
        *last = Layer::zeroed(last.spec().clone())?;
        Ok(Self {
            time_embed_dim: arch.time_embed_dim,
            time_dense,
            first,
            rest,
        })
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn channels(&self) -> usize {
        self.first.spec().dims[0] as usize
    }

    /// Layer specs in evaluation order: time-embed, its dense map, then the
    /// convolutional body.
    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![
            LayerSpec::time_embed(self.time_embed_dim),
            self.time_dense.spec().clone(),
            self.first.spec().clone(),
        ];
        v.extend(self.rest.specs());
        v
    }

    pub fn params(&self) -> Vec<&Array<T>> {
        let mut v: Vec<&Array<T>> = self.time_dense.params().iter().collect();
        v.extend(self.first.params());
        v.extend(self.rest.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array<T>> {
        let mut v: Vec<&mut Array<T>> = self.time_dense.params_mut().iter_mut().collect();
        v.extend(self.first.params_mut().iter_mut());
        v.extend(self.rest.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            time_embed_dim: self.time_embed_dim,
            time_dense: self.time_dense.cast(),
            first: self.first.cast(),
            rest: self.rest.cast(),
        }
    }

    fn time_bias(&self, t: usize) -> Result<Array<T>> {
        let e = sinusoidal_embedding(T::from_usize(t).unwrap(), self.time_embed_dim);
        self.time_dense.forward(&e)
    }

    fn add_channel_bias(h: &mut Array<T>, bias: &Array<T>) -> Result<()> {
        let (c, hh, ww) = h.chw()?;
        let plane = hh * ww;
        for ch in 0..c {
            let b = bias.data()[ch];
            h.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v + b);
        }
        Ok(())
    }

    /// Noise estimate for `x_t` at timestep `t` (`t = 0` allowed).
    pub fn eps_predict(&self, x_t: &Array<T>, t: usize) -> Result<Array<T>> {
        let mut h = self.first.forward(x_t)?;
        Self::add_channel_bias(&mut h, &self.time_bias(t)?)?;
        let out = self.rest.forward(&h)?;
        out.expect_same_shape(x_t, "denoiser output")?;
        Ok(out)
    }

    /// `mean((eps_hat − eps)²)` for one noised sample and its exact gradient.
    pub fn loss_and_grad(&self, x_t: &Array<T>, t: usize, eps: &Array<T>) -> Result<(T, DenoiserGrads<T>)> {
        let e = sinusoidal_embedding(T::from_usize(t).unwrap(), self.time_embed_dim);
        let (tb, tcache) = self.time_dense.forward_train(&e)?;
        let (mut h, fcache) = self.first.forward_train(x_t)?;
        Self::add_channel_bias(&mut h, &tb)?;
        let (out, tape) = self.rest.forward_train(&h)?;
        let diff = out.sub(eps)?;
        let n = T::from_usize(diff.len()).unwrap();
        let loss = diff.data().iter().fold(T::zero(), |a, &d| a + d * d) / n;
        let dout = diff.scale(T::lit(2.0) / n);

        let (dh, rest_grads) = self.rest.backward(&tape, &dout)?;
        let (c, hh, ww) = dh.chw()?;
        let plane = hh * ww;
        let dtb: Vec<T> = (0..c)
            .map(|ch| dh.data()[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let (_, tgrads) = self.time_dense.backward(&tcache, &Array::from_vec(dtb))?;
        let (_, fgrads) = self.first.backward(&fcache, &dh)?;
        let mut grads = tgrads;
        grads.extend(fgrads);
        grads.extend(rest_grads);
        Ok((loss, grads))
    }
}

impl Denoiser<f32> {
    /// Container form: schedule record first, then one record per layer.
    pub fn to_checkpoint(&self, sched: &NoiseSchedule) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.records.push(sched.to_record());
        let embed = Layer::<f32>::zeroed(LayerSpec::time_embed(self.time_embed_dim)).unwrap();
        ck.push_layers([&embed, &self.time_dense, &self.first]);
        ck.push_layers(self.rest.layers());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, NoiseSchedule)> {
        let bad = |m: &str| Error::format(format!("not a denoiser checkpoint: {m}"));
        let recs = &ck.records;
        if recs.len() < 4 {
            return Err(bad("too few records"));
        }
        let sched = NoiseSchedule::from_record(&recs[0])?;
        let embed = recs[1].to_layer()?;
        if embed.spec().kind != LayerKind::TimeEmbed {
            return Err(bad("missing time embedding"));
        }
        let time_dense = recs[2].to_layer()?;
        let first = recs[3].to_layer()?;
        if time_dense.spec().kind != LayerKind::Dense || first.spec().kind != LayerKind::Conv2d {
            return Err(bad("unexpected layer order"));
        }
        let rest = Sequential::new(recs[4..].iter().map(|r| r.to_layer()).collect::<Result<_>>()?);
        let d = Self {
            time_embed_dim: embed.spec().dims[0] as usize,
            time_dense,
            first,
            rest,
        };
        let c = d.channels();
        d.rest
            .output_shape(&[d.first.spec().dims[1] as usize, 8, 8])
            .ok()
            .filter(|s| s[0] == c)
            .ok_or_else(|| bad("body does not map back to the input channels"))?;
        Ok((d, sched))
    }
}

impl NoisePredictor for Denoiser<f32> {
    fn predict_eps(&self, x_t: &Array, t: usize) -> Result<Array> {
        self.eps_predict(x_t, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub arch: DenoiserArch,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            arch: DenoiserArch::default(),
        }
    }
}

impl DenoiserTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid(format!(
                "denoiser training needs positive epochs/batch/lr, got {}/{}/{}",
                self.epochs, self.batch_size, self.lr
            )));
        }
        Ok(())
    }
}

/// Minimizes `E‖eps − eps_theta(q_sample(x0, t, eps), t)‖²` with `t`
/// uniform in `1..=T` and fresh noise per sample per epoch. Returns the
/// model and the mean loss of each epoch.
pub fn train_denoiser(
    corpus: &[Array],
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, Vec<f32>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("denoiser corpus is empty"));
    }
    let mut init_rng = Rng::new(cfg.seed, 0);
    let mut model = Denoiser::<f32>::init(cfg.arch, &mut init_rng)?;
    let mut opt = AdamState::new(model.params());
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut rng = Rng::new(cfg.seed, 1);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(corpus.len());
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Array>> = None;
            for &i in batch {
                let x0 = &corpus[i];
                let t = rng.range_inclusive(1, sched.steps());
                let eps: Array = rng.normal_array(x0.shape());
                let xt = q_sample(x0, t, &eps, sched)?;
                let (loss, grads) = model.loss_and_grad(&xt, t, &eps)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("denoiser loss is {loss} in epoch {epoch}")));
                }
                total += loss as f64;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, g) in a.iter_mut().zip(&grads) {
                            dst.axpy(1.0, g)?;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let grads: Vec<Array> = acc.unwrap().iter().map(|g| g.scale(inv)).collect();
            opt.step(model.params_mut(), &grads, &hyper)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
        }
        let mean = (total / corpus.len() as f64) as f32;
        log::debug!("denoiser epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok((model, history))
}

/// Mean per-element `‖eps − eps_hat‖²` over fresh noisings of `images`.
pub fn heldout_loss(model: &Denoiser, images: &[Array], sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    for x0 in images {
        let t = rng.range_inclusive(1, sched.steps());
        let eps: Array = rng.normal_array(x0.shape());
        let xt = q_sample(x0, t, &eps, sched)?;
        let pred = model.eps_predict(&xt, t)?;
        let d = pred.sub(&eps)?;
        total += d.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / d.len() as f64;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;
    use crate::numerics::finite_diff_check;

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            channels: 1,
            hidden: 3,
            time_embed_dim: 4,
        }
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let mut rng = Rng::new(0, 0);
        let d = Denoiser::<f32>::init(DenoiserArch::default(), &mut rng).unwrap();
        let x: Array = rng.normal_array(&[1, 16, 16]);
        let y = d.eps_predict(&x, 5).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.eps_predict(&x, 0).unwrap(), y);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5, 0);
        let mut d = Denoiser::<f64>::init(tiny_arch(), &mut rng).unwrap();
        for p in d.params_mut() {
            let n: Array<f64> = rng.normal_array(p.shape());
            p.axpy(0.2, &n).unwrap();
        }
        let x: Array<f64> = rng.normal_array(&[1, 5, 5]);
        let eps: Array<f64> = rng.normal_array(&[1, 5, 5]);
        let params: Vec<Array<f64>> = d.params().into_iter().cloned().collect();
        let err = finite_diff_check(
            |ps| {
                let mut m = d.clone();
                for (dst, src) in m.params_mut().into_iter().zip(ps) {
                    *dst = src.clone();
                }
                m.loss_and_grad(&x, 7, &eps)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = Rng::new(2, 0);
        let d = Denoiser::<f32>::init(DenoiserArch::default(), &mut rng).unwrap();
        let sched = make_linear_schedule(100, 1e-3, 0.05).unwrap();
        let ck = d.to_checkpoint(&sched);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (d2, s2) = Denoiser::from_checkpoint(&back).unwrap();
        assert_eq!(d2, d);
        assert_eq!(s2, sched);
    }

    #[test]
    fn training_is_seeded_and_beats_zero_predictor() {
        let sched = make_linear_schedule(20, 1e-3, 0.1).unwrap();
        let corpus = vec![Array::zeros(&[1, 8, 8]); 32];
        let cfg = DenoiserTrainConfig {
            epochs: 12,
            batch_size: 8,
            lr: 3e-3,
            seed: 4,
            arch: tiny_arch(),
        };
        let (a, hist) = train_denoiser(&corpus, &sched, &cfg).unwrap();
        let (b, _) = train_denoiser(&corpus, &sched, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(hist.iter().all(|v| v.is_finite()));
        let held = heldout_loss(&a, &corpus[..16], &sched, &mut Rng::new(99, 0)).unwrap();
        assert!(held < 1.0, "held-out loss {held}");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let sched = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        assert!(train_denoiser(&[], &sched, &DenoiserTrainConfig::default()).is_err());
    }
}
