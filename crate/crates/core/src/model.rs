//! The full TriSPrompt network: recovery, tagging, mutual views and the
//! classifier, evaluated batch-wise on a [`Tape`].

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{Dims, FeatureRecord, ModalityKind, Mode, PresenceMask};
use crate::ma::{self, LatentBundle, LatentGaussian, MaError, MaModule, MaShape, Origin};
use crate::mm::{row_broadcast, MissPromptBank};
use crate::mv::{GridFeature, MvError, MvModule, MvTrace, Pyramid};
use crate::objective::{self, Classifier, LossBreakdown};
use crate::params::{standard_normal, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Ma(#[from] MaError),
    #[error(transparent)]
    Mv(#[from] MvError),
    #[error("expected width {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("parameter layout does not match the config")]
    LayoutMismatch,
}

/// Which prompt families are replaced by frozen zero vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-MA")]
    NoMa,
    #[serde(rename = "no-MM")]
    NoMm,
    #[serde(rename = "no-MV")]
    NoMv,
    #[serde(rename = "no-MAM")]
    NoMam,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoMa,
        Ablation::NoMm,
        Ablation::NoMv,
        Ablation::NoMam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMa => "no-MA",
            Ablation::NoMm => "no-MM",
            Ablation::NoMv => "no-MV",
            Ablation::NoMam => "no-MAM",
        }
    }

    pub fn use_ma(self) -> bool {
        !matches!(self, Ablation::NoMa | Ablation::NoMam)
    }

    pub fn use_mm(self) -> bool {
        !matches!(self, Ablation::NoMm | Ablation::NoMam)
    }

    pub fn use_mv(self) -> bool {
        self != Ablation::NoMv
    }

    /// Parameter-name prefixes whose gradient is zero by construction.
    pub fn frozen_prefixes(self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.use_ma() {
            v.push("prompt.aware.");
        }
        if !self.use_mm() {
            v.push("prompt.miss.");
        }
        if !self.use_mv() {
            v.push("mv.");
        }
        v
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub inputs: [usize; 3],
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub aware_len: usize,
    pub miss_len: usize,
    pub mutual_len: usize,
    pub levels: usize,
    pub grid_tokens: usize,
    pub heads: usize,
    pub kernel: usize,
    pub cls_hidden: usize,
    pub logvar_clamp: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard(Mode::Three)
    }
}

impl ModelConfig {
    pub fn standard(mode: Mode) -> Self {
        let dims = Dims::standard(mode);
        Self {
            mode,
            inputs: [dims.text, dims.image, dims.comment.unwrap_or(0)],
            latent_dim: 240,
            enc_hidden: 512,
            dec_hidden: 512,
            aware_len: 32,
            miss_len: 16,
            mutual_len: 64,
            levels: 3,
            grid_tokens: 16,
            heads: 4,
            kernel: 3,
            cls_hidden: 256,
            logvar_clamp: 8.0,
            ablation: Ablation::Full,
        }
    }

    /// Small configuration for finite-difference checks.
    pub fn toy(mode: Mode) -> Self {
        Self {
            mode,
            inputs: [12, 10, if mode == Mode::Three { 12 } else { 0 }],
            latent_dim: 8,
            enc_hidden: 16,
            dec_hidden: 16,
            aware_len: 4,
            miss_len: 8,
            mutual_len: 4,
            levels: 2,
            grid_tokens: 4,
            heads: 2,
            kernel: 3,
            cls_hidden: 16,
            logvar_clamp: 8.0,
            ablation: Ablation::Full,
        }
    }

    /// Width of a tagged latent.
    pub fn tagged_width(&self) -> usize {
        self.latent_dim + self.miss_len
    }

    pub fn classifier_input(&self) -> usize {
        self.mutual_len + self.mode.modality_count() * self.tagged_width()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            text: self.inputs[0],
            image: self.inputs[1],
            comment: (self.mode == Mode::Three).then_some(self.inputs[2]),
        }
    }

    pub fn validate(&self) -> Result<Pyramid, ModelError> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("aware_len", self.aware_len),
            ("mutual_len", self.mutual_len),
            ("cls_hidden", self.cls_hidden),
            ("text input", self.inputs[0]),
            ("image input", self.inputs[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.mode == Mode::Three && self.inputs[2] == 0 {
            return Err(ModelError::Config("comment input must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config("kernel must be odd".into()));
        }
        if !(self.logvar_clamp > 0.0 && self.logvar_clamp.is_finite()) {
            return Err(ModelError::Config("logvar_clamp must be positive".into()));
        }
        let levels = if self.mode == Mode::Two { 1 } else { self.levels };
        Ok(Pyramid::new(self.tagged_width(), self.grid_tokens, levels, self.heads)?)
    }
}

/// Weights of the auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: objective::DEFAULT_LAMBDA1,
            lambda2: objective::DEFAULT_LAMBDA2,
        }
    }
}

/// Dense mini-batch. Missing modalities hold zero rows.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Vec<Array2<T>>,
    /// `[batch, modalities]` of 0/1.
    pub mask: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_records(records: &[&FeatureRecord], config: &ModelConfig) -> Self {
        let mode = config.mode;
        let rows = records.len();
        let mut inputs: Vec<Array2<T>> = mode
            .modalities()
            .iter()
            .map(|k| Array2::zeros((rows, config.inputs[k.index()])))
            .collect();
        let mut mask = Array2::zeros((rows, mode.modality_count()));
        for (r, rec) in records.iter().enumerate() {
            for &kind in mode.modalities() {
                if let Some(f) = rec.feature(kind) {
                    mask[[r, kind.index()]] = T::one();
                    let mut row = inputs[kind.index()].row_mut(r);
                    for (dst, &v) in row.iter_mut().zip(f) {
                        *dst = T::c(v as f64);
                    }
                }
            }
        }
        let labels = records.iter().map(|r| r.label as usize).collect();
        Self { inputs, mask, labels }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn mask_column(&self, kind: ModalityKind) -> Array1<T> {
        self.mask.column(kind.index()).to_owned()
    }

    /// Standard-normal reparameterization noise, one `[batch, d]` block per
    /// modality.
    pub fn sample_noise<R: Rng>(&self, latent_dim: usize, rng: &mut R) -> Vec<Array2<T>> {
        (0..self.inputs.len())
            .map(|_| {
                standard_normal::<T, R>(&[self.rows(), latent_dim], rng)
                    .into_dimensionality()
                    .expect("2-d")
            })
            .collect()
    }
}

/// Tape handles produced by one batched pass.
pub struct Forward {
    pub total: Var,
    pub cls: Var,
    pub kl: Var,
    pub rec: Var,
    pub ce_rows: Var,
    pub logits: Var,
    pub mu: Vec<Var>,
    pub logvar: Vec<Var>,
    pub z: Vec<Var>,
    /// Decoder input per modality.
    pub source: Vec<Var>,
    /// Decoder output per modality.
    pub recon: Vec<Var>,
    pub latent: Vec<Var>,
    pub tagged: Vec<Var>,
    pub mutual: Var,
    pub mv: Option<MvTrace>,
}

impl Forward {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>, w: LossWeights) -> LossBreakdown {
        objective::total_loss(
            tape.scalar(self.cls).to_f64_lossy(),
            tape.scalar(self.kl).to_f64_lossy(),
            tape.scalar(self.rec).to_f64_lossy(),
            w.lambda1,
            w.lambda2,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TriSPrompt<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ma: MaModule,
    pub mm: MissPromptBank,
    pub mv: MvModule,
    pub cls: Classifier,
}

impl<T: Scalar> TriSPrompt<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self, ModelError> {
        let pyramid = config.validate()?;
        let mut rng = seed::rng(init_seed);
        let mut store = ParamStore::new();
        let ma = MaModule::new(
            &MaShape {
                mode: config.mode,
                inputs: config.inputs,
                enc_hidden: config.enc_hidden,
                dec_hidden: config.dec_hidden,
                latent_dim: config.latent_dim,
                aware_len: config.aware_len,
                logvar_clamp: config.logvar_clamp,
            },
            &mut store,
            &mut rng,
        );
        let mm = MissPromptBank::new(config.mode, config.miss_len, &mut store, &mut rng);
        let mv = MvModule::new(
            config.mode,
            pyramid,
            config.heads,
            config.kernel,
            config.mutual_len,
            &mut store,
            &mut rng,
        );
        let cls = Classifier::new(config.classifier_input(), config.cls_hidden, &mut store, &mut rng);
        Ok(Self {
            config,
            store,
            ma,
            mm,
            mv,
            cls,
        })
    }

    /// Rebuilds the module structure for `config` and installs `store`.
    pub fn with_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if !model.store.same_layout(&store) {
            return Err(ModelError::LayoutMismatch);
        }
        model.store = store;
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    /// Batched forward pass. `noise == None` means `z = mu`.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        pv: &ParamVars,
        batch: &Batch<T>,
        noise: Option<&[Array2<T>]>,
        weights: LossWeights,
    ) -> Forward {
        let rows = batch.rows();
        let d = self.config.latent_dim;
        let kinds = self.mode().modalities();
        let half = T::c(0.5);

        let n_obs: Array1<T> = batch.mask.sum_axis(Axis(1));
        let cols: Vec<Array1<T>> = kinds.iter().map(|&k| batch.mask_column(k)).collect();

        let mut mu = Vec::new();
        let mut logvar = Vec::new();
        let mut z = Vec::new();
        for &kind in kinds {
            let x = tape.constant(batch.inputs[kind.index()].clone().into_dyn());
            let (m, lv) = self.ma.encode_fwd(tape, pv, kind, x);
            let zk = match noise {
                Some(noise) => {
                    let sd = tape.exp(tape.scale(lv, half));
                    let eps = Arc::new(noise[kind.index()].clone().into_dyn());
                    tape.add(m, tape.mul_const(sd, eps))
                }
                None => m,
            };
            mu.push(m);
            logvar.push(lv);
            z.push(zk);
        }

        let masks: Vec<Arc<ArrayD<T>>> = cols.iter().map(|c| Arc::new(row_broadcast(c, d))).collect();
        let inv_masks: Vec<Arc<ArrayD<T>>> = masks.iter().map(|m| Arc::new(m.mapv(|v| T::one() - v))).collect();
        let masked: Vec<Var> = z.iter().zip(&masks).map(|(&zk, m)| tape.mul_const(zk, m.clone())).collect();

        let mut source = Vec::new();
        let mut recon = Vec::new();
        let mut latent = Vec::new();
        let mut kl_terms = Vec::new();
        let mut rec_terms = Vec::new();
        for (i, &kind) in kinds.iter().enumerate() {
            let inv: Array1<T> = ndarray::Zip::from(&n_obs).and(&cols[i]).map_collect(|&n, &m| {
                let denom = n - m;
                if denom > T::zero() {
                    T::one() / denom
                } else {
                    T::zero()
                }
            });
            let mut rest = masked.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
            let first = rest.next().expect("at least two modalities");
            let others = rest.fold(first, |acc, v| tape.add(acc, v));
            let src = tape.mul_const(others, Arc::new(row_broadcast(&inv, d)));
            let zhat = self.ma.decode_fwd(tape, pv, kind, src, self.ablation().use_ma());
            let keep = tape.mul_const(z[i], masks[i].clone());
            let fill = tape.mul_const(zhat, inv_masks[i].clone());
            latent.push(tape.add(keep, fill));

            // per-row KL of the encoder Gaussian
            let lv = logvar[i];
            let e = tape.exp(lv);
            let m2 = tape.square(mu[i]);
            let t = tape.sub(tape.add(e, m2), lv);
            let t = tape.scale(tape.add_scalar(t, -T::one()), half);
            let kl_rows = tape.sum_last(t);
            let w_kl: Array1<T> = ndarray::Zip::from(&cols[i]).and(&n_obs).map_collect(|&m, &n| m / n);
            kl_terms.push(tape.mul_const(kl_rows, Arc::new(w_kl.into_dyn())));

            let diff = tape.sub(zhat, z[i]);
            let mse_rows = tape.scale(tape.sum_last(tape.square(diff)), T::one() / T::c(d as f64));
            let w_rec: Array1<T> = ndarray::Zip::from(&cols[i]).and(&n_obs).map_collect(|&m, &n| {
                if n >= T::c(2.0) {
                    m / n
                } else {
                    T::zero()
                }
            });
            rec_terms.push(tape.mul_const(mse_rows, Arc::new(w_rec.into_dyn())));

            source.push(src);
            recon.push(zhat);
        }
        let kl_rows = kl_terms[1..].iter().fold(kl_terms[0], |acc, &v| tape.add(acc, v));
        let rec_rows = rec_terms[1..].iter().fold(rec_terms[0], |acc, &v| tape.add(acc, v));
        let kl = tape.mean_all(kl_rows);
        let rec = tape.mean_all(rec_rows);

        let tagged: Vec<Var> = kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| self.mm.tag_fwd(tape, pv, kind, latent[i], &cols[i], self.ablation().use_mm()))
            .collect();

        let (mutual, mv) = if self.ablation().use_mv() {
            let pass = self.mv.forward(tape, pv, tagged[0], tagged[1], tagged.get(2).copied());
            (pass.output, Some(pass.trace))
        } else {
            let zeros = ArrayD::zeros(IxDyn(&[rows, self.config.mutual_len]));
            (tape.constant(zeros), None)
        };

        let mut parts = vec![mutual];
        parts.extend(&tagged);
        let features = tape.concat_last(&parts);
        let logits = self.cls.logits_fwd(tape, pv, features);
        let ce_rows = tape.softmax_cross_entropy(logits, &batch.labels);
        let cls = tape.mean_all(ce_rows);
        let aux = tape.add(
            tape.scale(kl, T::c(weights.lambda1)),
            tape.scale(rec, T::c(weights.lambda2)),
        );
        let total = tape.add(cls, aux);
        Forward {
            total,
            cls,
            kl,
            rec,
            ce_rows,
            logits,
            mu,
            logvar,
            z,
            source,
            recon,
            latent,
            tagged,
            mutual,
            mv,
        }
    }

    /// Loss and rumor probabilities at evaluation time (`z = mu`).
    pub fn evaluate(&self, batch: &Batch<T>, weights: LossWeights) -> (LossBreakdown, Vec<f64>) {
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let fwd = self.forward(&tape, &pv, batch, None, weights);
        let logits = tape.value(fwd.logits);
        let probs = logits
            .outer_iter()
            .map(|row| objective::softmax_pair([row[0].to_f64_lossy(), row[1].to_f64_lossy()])[1])
            .collect();
        (fwd.breakdown(&tape, weights), probs)
    }

    /// Rumor probability of every record, in chunks.
    pub fn predict(&self, records: &[FeatureRecord]) -> Vec<f64> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(256) {
            let refs: Vec<&FeatureRecord> = chunk.iter().collect();
            let batch = Batch::from_records(&refs, &self.config);
            out.extend(self.evaluate(&batch, LossWeights::default()).1);
        }
        out
    }

    // ---- single-sample views ----------------------------------------------

    fn row(tape: &Tape<T>, v: ArrayView1<T>) -> Var {
        tape.constant(v.to_owned().insert_axis(Axis(0)).into_dyn())
    }

    fn unrow(tape: &Tape<T>, v: Var) -> Array1<T> {
        tape.value(v).iter().copied().collect()
    }

    fn grid_var(tape: &Tape<T>, g: &GridFeature<T>) -> Var {
        tape.constant(g.values.clone().insert_axis(Axis(0)).into_dyn())
    }

    fn to_grid(tape: &Tape<T>, v: Var) -> GridFeature<T> {
        let val = tape.value(v);
        let shape = val.shape();
        let values = Array2::from_shape_vec((shape[1], shape[2]), val.iter().copied().collect()).expect("grid");
        GridFeature { values }
    }

    fn check_width(expected: usize, found: usize) -> Result<(), ModelError> {
        if expected != found {
            return Err(ModelError::DimMismatch { expected, found });
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView1<T>, kind: ModalityKind) -> Result<LatentGaussian<T>, ModelError> {
        let expected = self.config.inputs[kind.index()];
        if x.len() != expected {
            return Err(MaError::DimMismatch {
                kind,
                expected,
                found: x.len(),
            }
            .into());
        }
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let (mu, lv) = self.ma.encode_fwd(&tape, &pv, kind, Self::row(&tape, x));
        Ok(LatentGaussian {
            mu: Self::unrow(&tape, mu),
            logvar: Self::unrow(&tape, lv),
        })
    }

    pub fn decode(&self, source: ArrayView1<T>, kind: ModalityKind) -> Result<Array1<T>, ModelError> {
        Self::check_width(self.config.latent_dim, source.len())?;
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let out = self
            .ma
            .decode_fwd(&tape, &pv, kind, Self::row(&tape, source), self.ablation().use_ma());
        Ok(Self::unrow(&tape, out))
    }

    pub fn recover(&self, mask: &PresenceMask, latents: &[Option<Array1<T>>]) -> Result<LatentBundle<T>, ModelError> {
        Ok(ma::recover_with(mask, latents, |s, k| {
            self.decode(s, k).expect("source width checked")
        })?)
    }

    pub fn reconstruction_loss(&self, mask: &PresenceMask, latents: &[Option<Array1<T>>]) -> Result<T, ModelError> {
        Ok(ma::reconstruction_loss_with(mask, latents, |s, k| {
            self.decode(s, k).expect("source width checked")
        })?)
    }

    /// Encoder means of every present modality, then recovery.
    pub fn latents(&self, record: &FeatureRecord) -> Result<LatentBundle<T>, ModelError> {
        let mut gaussians = vec![None; self.mode().modality_count()];
        let mut latents = vec![None; self.mode().modality_count()];
        for kind in record.mask.observed() {
            let x: Array1<T> = record
                .feature(kind)
                .expect("present")
                .iter()
                .map(|&v| T::c(v as f64))
                .collect();
            let g = self.encode(x.view(), kind)?;
            latents[kind.index()] = Some(g.mu.clone());
            gaussians[kind.index()] = Some(g);
        }
        let mut bundle = self.recover(&record.mask, &latents)?;
        bundle.gaussians = gaussians;
        Ok(bundle)
    }

    pub fn tag(&self, z: ArrayView1<T>, kind: ModalityKind, origin: Origin) -> Result<Array1<T>, ModelError> {
        Self::check_width(self.config.latent_dim, z.len())?;
        Ok(self.mm.tag(&self.store, z, kind, origin, self.ablation().use_mm()))
    }

    pub fn cross_attention(&self, text: ArrayView1<T>, image: ArrayView1<T>) -> Result<GridFeature<T>, ModelError> {
        let w = self.config.tagged_width();
        Self::check_width(w, text.len())?;
        Self::check_width(w, image.len())?;
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let (p1, _) = self
            .mv
            .cross_attention_fwd(&tape, &pv, Self::row(&tape, text), Self::row(&tape, image));
        Ok(Self::to_grid(&tape, p1))
    }

    pub fn down_stack(&self, p1: &GridFeature<T>) -> Result<Vec<GridFeature<T>>, ModelError> {
        let expected = self.mv.pyramid.level(1);
        if p1.shape() != expected {
            return Err(MvError::ShapeMismatch {
                expected,
                found: p1.shape(),
            }
            .into());
        }
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let levels = self.mv.down_fwd(&tape, &pv, Self::grid_var(&tape, p1));
        Ok(levels.into_iter().map(|v| Self::to_grid(&tape, v)).collect())
    }

    /// Returns `(objs, gates)`, deepest level first.
    pub fn cross_enhance(
        &self,
        levels: &[GridFeature<T>],
        comment: ArrayView1<T>,
    ) -> Result<(Vec<GridFeature<T>>, Vec<GridFeature<T>>), ModelError> {
        Self::check_width(self.config.tagged_width(), comment.len())?;
        self.check_levels(levels)?;
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let vars: Vec<Var> = levels.iter().map(|g| Self::grid_var(&tape, g)).collect();
        let (objs, gates) = self.mv.cross_enhance_fwd(&tape, &pv, &vars, Self::row(&tape, comment));
        Ok((
            objs.into_iter().map(|v| Self::to_grid(&tape, v)).collect(),
            gates.into_iter().map(|v| Self::to_grid(&tape, v)).collect(),
        ))
    }

    fn check_levels(&self, levels: &[GridFeature<T>]) -> Result<(), ModelError> {
        let n = self.mv.pyramid.levels;
        if levels.len() != n {
            return Err(ModelError::Config(format!("expected {n} levels, got {}", levels.len())));
        }
        for (l, g) in levels.iter().enumerate() {
            let expected = self.mv.pyramid.level(l + 1);
            if g.shape() != expected {
                return Err(MvError::ShapeMismatch {
                    expected,
                    found: g.shape(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Returns `(p_mutual, intermediate mutual grids)`.
    pub fn up_stack(
        &self,
        objs: &[GridFeature<T>],
        init: &GridFeature<T>,
    ) -> Result<(Array1<T>, Vec<GridFeature<T>>), ModelError> {
        let n = self.mv.pyramid.levels;
        let deepest = self.mv.pyramid.level(n);
        if init.shape() != deepest {
            return Err(MvError::ShapeMismatch {
                expected: deepest,
                found: init.shape(),
            }
            .into());
        }
        let mut reversed: Vec<GridFeature<T>> = objs.to_vec();
        reversed.reverse();
        self.check_levels(&reversed)?;
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let vars: Vec<Var> = objs.iter().map(|g| Self::grid_var(&tape, g)).collect();
        let (out, mutuals) = self.mv.up_fwd(&tape, &pv, &vars, Self::grid_var(&tape, init));
        Ok((
            Self::unrow(&tape, out),
            mutuals.into_iter().map(|v| Self::to_grid(&tape, v)).collect(),
        ))
    }

    /// `p_mutual` of one post from its tagged latents.
    pub fn mv_prompt(&self, tagged: &[ArrayView1<T>]) -> Result<Array1<T>, ModelError> {
        let m = self.mode().modality_count();
        if tagged.len() != m {
            return Err(ModelError::Config(format!("expected {m} tagged latents")));
        }
        for t in tagged {
            Self::check_width(self.config.tagged_width(), t.len())?;
        }
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let vars: Vec<Var> = tagged.iter().map(|t| Self::row(&tape, *t)).collect();
        let pass = self.mv.forward(&tape, &pv, vars[0], vars[1], vars.get(2).copied());
        Ok(Self::unrow(&tape, pass.output))
    }

    /// `(p_non_rumor, p_rumor)` from the mutual prompt and tagged latents.
    pub fn classify(&self, mutual: ArrayView1<T>, tagged: &[ArrayView1<T>]) -> Result<[f64; 2], ModelError> {
        let width = mutual.len() + tagged.iter().map(|t| t.len()).sum::<usize>();
        Self::check_width(self.cls.input, width)?;
        let tape = Tape::new();
        let pv = self.store.constants(&tape);
        let mut parts = vec![Self::row(&tape, mutual)];
        parts.extend(tagged.iter().map(|t| Self::row(&tape, *t)));
        let x = tape.concat_last(&parts);
        let logits = tape.value(self.cls.logits_fwd(&tape, &pv, x));
        let l: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
        Ok(objective::softmax_pair([l[0], l[1]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> TriSPrompt<f64> {
        TriSPrompt::new(ModelConfig::toy(Mode::Three), 7).unwrap()
    }

    fn random_record(id: usize, mask: [bool; 3], rng: &mut ChaCha8Rng) -> FeatureRecord {
        let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let (t, i, c) = (v(12), v(10), v(12));
        FeatureRecord::new(
            format!("r{id}"),
            (id % 2) as u8,
            PresenceMask::new(&mask).unwrap(),
            mask[0].then_some(t),
            mask[1].then_some(i),
            mask[2].then_some(c),
        )
    }

    fn mixed_records() -> Vec<FeatureRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let masks = [
            [true, true, true],
            [false, true, true],
            [true, false, true],
            [true, true, false],
            [true, false, false],
            [false, true, false],
            [false, false, true],
        ];
        masks.iter().enumerate().map(|(i, &m)| random_record(i, m, &mut rng)).collect()
    }

    fn zero_params(model: &mut TriSPrompt<f64>, prefix: &str) {
        let ids: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with(prefix))
            .collect();
        for id in ids {
            model.store.get_mut(id).fill(0.0);
        }
    }

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.tagged_width(), 256);
        assert_eq!(c.classifier_input(), 832);
        assert_eq!(c.latent_dim + c.aware_len, 272);
        let p = c.validate().unwrap();
        assert_eq!((1..=3).map(|l| p.level(l)).collect::<Vec<_>>(), vec![(16, 16), (8, 32), (4, 64)]);
    }

    #[test]
    fn default_model_shapes() {
        let model: TriSPrompt<f32> = TriSPrompt::new(ModelConfig::default(), 1).unwrap();
        let x = Array1::<f32>::zeros(768);
        let g = model.encode(x.view(), ModalityKind::Text).unwrap();
        assert_eq!((g.mu.len(), g.logvar.len()), (240, 240));
        assert_eq!(model.mm.count(), 6);
        let z = model.tag(g.mu.view(), ModalityKind::Text, Origin::Observed).unwrap();
        assert_eq!(z.len(), 256);
        let p1 = model.cross_attention(z.view(), z.view()).unwrap();
        assert_eq!(p1.shape(), (16, 16));
        let levels = model.down_stack(&p1).unwrap();
        let shapes: Vec<_> = levels.iter().map(|g| g.shape()).collect();
        assert_eq!(shapes, vec![(16, 16), (8, 32), (4, 64)]);
        let (objs, gates) = model.cross_enhance(&levels, z.view()).unwrap();
        let shapes: Vec<_> = objs.iter().map(|g| g.shape()).collect();
        assert_eq!(shapes, vec![(4, 64), (8, 32), (16, 16)]);
        assert!(gates.iter().all(|g| g.values.iter().all(|&w| w > 0.0 && w < 1.0)));
        let (out, mutuals) = model.up_stack(&objs, levels.last().unwrap()).unwrap();
        assert_eq!(out.len(), 64);
        let shapes: Vec<_> = mutuals.iter().map(|g| g.shape()).collect();
        assert_eq!(shapes, vec![(4, 64), (8, 32), (16, 16)]);
        let p = model.mv_prompt(&[z.view(), z.view(), z.view()]).unwrap();
        assert_eq!(p, out);
        let probs = model.classify(p.view(), &[z.view(), z.view(), z.view()]).unwrap();
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let model = toy();
        let x = Array1::<f64>::zeros(5);
        assert!(matches!(
            model.encode(x.view(), ModalityKind::Image),
            Err(ModelError::Ma(MaError::DimMismatch { expected: 10, found: 5, .. }))
        ));
        assert!(matches!(
            model.cross_attention(x.view(), x.view()),
            Err(ModelError::DimMismatch { expected: 16, found: 5 })
        ));
    }

    #[test]
    fn zero_weights_expose_biases() {
        let mut model = toy();
        for name in ["enc.text.hidden.w", "enc.text.mu.w", "enc.text.logvar.w"] {
            model.store.by_name_mut(name).unwrap().fill(0.0);
        }
        model.store.by_name_mut("enc.text.mu.b").unwrap().fill(0.25);
        model.store.by_name_mut("enc.text.logvar.b").unwrap().fill(-0.5);
        let x = Array1::from_elem(12, 3.0);
        let g = model.encode(x.view(), ModalityKind::Text).unwrap();
        assert!(g.mu.iter().all(|&v| v == 0.25));
        assert!(g.logvar.iter().all(|&v| v == -0.5));
        assert_eq!(model.encode(x.view(), ModalityKind::Text).unwrap(), g);

        model.store.by_name_mut("dec.image.out.w").unwrap().fill(0.0);
        model.store.by_name_mut("dec.image.out.b").unwrap().fill(1.5);
        let s = Array1::from_elem(8, 2.0);
        assert!(model.decode(s.view(), ModalityKind::Image).unwrap().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn aware_prompts_distinguish_decoders() {
        let mut model = toy();
        // share one decoder between two kinds; only the prompt differs
        for part in ["hidden.w", "hidden.b", "out.w", "out.b"] {
            let src = model.store.by_name_mut(&format!("dec.text.{part}")).unwrap().clone();
            *model.store.by_name_mut(&format!("dec.image.{part}")).unwrap() = src;
        }
        let s = Array1::from_elem(8, 0.3);
        let a = model.decode(s.view(), ModalityKind::Text).unwrap();
        let b = model.decode(s.view(), ModalityKind::Image).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn tag_prefix_and_suffix() {
        let model = toy();
        let z = Array1::from_iter((0..8).map(|i| i as f64 * 0.5));
        let obs = model.tag(z.view(), ModalityKind::Text, Origin::Observed).unwrap();
        let rec = model.tag(z.view(), ModalityKind::Text, Origin::Recovered).unwrap();
        assert_eq!(obs.len(), 16);
        assert_eq!(obs.slice(ndarray::s![..8]), z);
        assert_eq!(rec.slice(ndarray::s![..8]), z);
        assert_ne!(obs.slice(ndarray::s![8..]), rec.slice(ndarray::s![8..]));
    }

    #[test]
    fn zero_gate_conv_gives_half() {
        let mut model = toy();
        zero_params(&mut model, "mv.gate");
        let t = Array1::from_iter((0..16).map(|i| (i as f64 * 0.37).sin()));
        let p1 = model.cross_attention(t.view(), t.view()).unwrap();
        let levels = model.down_stack(&p1).unwrap();
        let (objs, gates) = model.cross_enhance(&levels, t.view()).unwrap();
        assert!(gates.iter().all(|g| g.values.iter().all(|&w| w == 0.5)));
        // deepest level pairs with the reshaped comment grid
        let c1 = t.clone().into_shape_with_order((2, 8)).unwrap();
        let expected = &levels[1].values + &(c1 * 0.5);
        assert!((&objs[0].values - &expected).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_output_projection_keeps_text_tokens() {
        let mut model = toy();
        zero_params(&mut model, "mv.attn.o");
        let t = Array1::from_iter((0..16).map(|i| i as f64));
        let i = Array1::from_iter((0..16).map(|i| -(i as f64)));
        let p1 = model.cross_attention(t.view(), i.view()).unwrap();
        // layer norm of the text grid itself
        let grid = t.into_shape_with_order((4, 4)).unwrap();
        for (row, out) in grid.rows().into_iter().zip(p1.values.rows()) {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            for (&x, &y) in row.iter().zip(out) {
                assert!(((x - mean) / (var + 1e-5).sqrt() - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_classifier_output_is_uniform() {
        let mut model = toy();
        zero_params(&mut model, "cls.out");
        let p = Array1::from_elem(4, 1.0);
        let t = Array1::from_elem(16, 0.2);
        assert_eq!(model.classify(p.view(), &[t.view(), t.view(), t.view()]).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn batched_pass_matches_single_sample_views() {
        let model = toy();
        let records = mixed_records();
        let refs: Vec<&FeatureRecord> = records.iter().collect();
        let batch = Batch::from_records(&refs, &model.config);
        let tape = Tape::new();
        let pv = model.store.constants(&tape);
        let fwd = model.forward(&tape, &pv, &batch, None, LossWeights::default());
        let logits = tape.value(fwd.logits);
        let mut rec_sum = 0.0;
        let mut kl_sum = 0.0;
        for (r, rec) in records.iter().enumerate() {
            let bundle = model.latents(rec).unwrap();
            let observed: Vec<Option<Array1<f64>>> =
                bundle.gaussians.iter().map(|g| g.as_ref().map(|g| g.mu.clone())).collect();
            rec_sum += model.reconstruction_loss(&rec.mask, &observed).unwrap();
            let obs: Vec<_> = bundle.gaussians.iter().flatten().cloned().collect();
            kl_sum += ma::kl_loss(&obs).unwrap();
            let tagged: Vec<Array1<f64>> = ModalityKind::ALL
                .iter()
                .map(|&k| model.tag(bundle.latent(k).view(), k, bundle.origin(k)).unwrap())
                .collect();
            let views: Vec<_> = tagged.iter().map(|t| t.view()).collect();
            let p = model.mv_prompt(&views).unwrap();
            let probs = model.classify(p.view(), &views).unwrap();
            let batched = objective::softmax_pair([logits[[r, 0]], logits[[r, 1]]]);
            assert!((probs[1] - batched[1]).abs() < 1e-12, "row {r}");
        }
        let n = records.len() as f64;
        assert!((tape.scalar(fwd.rec) - rec_sum / n).abs() < 1e-12);
        assert!((tape.scalar(fwd.kl) - kl_sum / n).abs() < 1e-12);
        let b = fwd.breakdown(&tape, LossWeights::default());
        assert_eq!(b.total, b.cls + (0.1 * b.kl + 0.001 * b.rec));
        // batch CE is the mean of per-row CE
        let rows: f64 = tape.value(fwd.ce_rows).iter().sum();
        assert!((tape.scalar(fwd.cls) - rows / n).abs() < 1e-12);
    }

    #[test]
    fn decoder_source_excludes_own_modality() {
        let model = toy();
        let records = mixed_records();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in ModalityKind::ALL {
            let perturbed: Vec<FeatureRecord> = records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    if r.mask.is_present(kind) {
                        let dims = [12, 10, 12][kind.index()];
                        let f: Vec<f32> = (0..dims).map(|_| rng.random_range(-3.0f32..3.0)).collect();
                        r = FeatureRecord::new(
                            r.id.clone(),
                            r.label,
                            r.mask,
                            if kind == ModalityKind::Text { Some(f.clone()) } else { r.text().map(<[f32]>::to_vec) },
                            if kind == ModalityKind::Image { Some(f.clone()) } else { r.image().map(<[f32]>::to_vec) },
                            if kind == ModalityKind::Comment { Some(f) } else { r.comment().map(<[f32]>::to_vec) },
                        );
                    }
                    r
                })
                .collect();
            let src = |recs: &[FeatureRecord]| {
                let refs: Vec<&FeatureRecord> = recs.iter().collect();
                let batch = Batch::from_records(&refs, &model.config);
                let tape = Tape::new();
                let pv = model.store.constants(&tape);
                let fwd = model.forward(&tape, &pv, &batch, None, LossWeights::default());
                (*tape.value(fwd.source[kind.index()])).clone()
            };
            assert_eq!(src(&records), src(&perturbed), "{kind}");
        }
    }

    #[test]
    fn full_mask_recovery_is_identity() {
        let model = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = random_record(0, [true, true, true], &mut rng);
        let bundle = model.latents(&rec).unwrap();
        for k in ModalityKind::ALL {
            assert_eq!(bundle.latent(k), &bundle.gaussians[k.index()].as_ref().unwrap().mu);
        }
        let again = model
            .recover(&rec.mask, &bundle.latents.iter().cloned().map(Some).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(again.latents, bundle.latents);
    }

    #[test]
    fn ablations_keep_shapes() {
        let records = mixed_records();
        let refs: Vec<&FeatureRecord> = records.iter().collect();
        for ab in Ablation::ALL {
            let mut cfg = ModelConfig::toy(Mode::Three);
            cfg.ablation = ab;
            let model: TriSPrompt<f64> = TriSPrompt::new(cfg, 2).unwrap();
            let batch = Batch::from_records(&refs, &model.config);
            let (loss, probs) = model.evaluate(&batch, LossWeights::default());
            assert_eq!(probs.len(), records.len());
            assert!(loss.total.is_finite());
        }
    }

    #[test]
    fn two_modality_model() {
        let model: TriSPrompt<f64> = TriSPrompt::new(ModelConfig::toy(Mode::Two), 4).unwrap();
        assert_eq!(model.mm.count(), 4);
        assert!(model.store.names().iter().all(|n| !n.contains("comment") && !n.starts_with("mv.gate")));
        let t = Array1::from_elem(16, 0.1);
        assert_eq!(model.mv_prompt(&[t.view(), t.view()]).unwrap().len(), 4);
    }

    #[test]
    fn ablation_serde_names() {
        let names: Vec<String> = Ablation::ALL.iter().map(|a| serde_json::to_string(a).unwrap()).collect();
        assert_eq!(names, ["\"full\"", "\"no-MA\"", "\"no-MM\"", "\"no-MV\"", "\"no-MAM\""]);
    }
}
