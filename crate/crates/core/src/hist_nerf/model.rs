use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoding::{encoded_len, EncodingConfig};
use std::path::Path;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::LuminanceHistogram;
use crate::error::{Error, Result};

const CHECKPOINT_KIND: &str = "hist_nerf";

/// Architecture of the histogram-conditioned field.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfConfig {
    pub n_bins: usize,
    pub static_dim: usize,
    pub transient_dim: usize,
    pub width: usize,
    pub base_depth: usize,
    pub static_depth: usize,
    pub transient_depth: usize,
    pub encoding: EncodingConfig,
    pub beta_min: f64,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            static_dim: 50,
            transient_dim: 20,
            width: 128,
            base_depth: 8,
            static_depth: 4,
            transient_depth: 4,
            encoding: EncodingConfig::default(),
            beta_min: 0.03,
        }
    }
}

impl NerfConfig {
    /// Key/value echo stored in checkpoints.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.encoding;
        [
            ("n_bins", self.n_bins.to_string()),
            ("static_dim", self.static_dim.to_string()),
            ("transient_dim", self.transient_dim.to_string()),
            ("width", self.width.to_string()),
            ("base_depth", self.base_depth.to_string()),
            ("static_depth", self.static_depth.to_string()),
            ("transient_depth", self.transient_depth.to_string()),
            ("n_freqs_position", e.n_freqs_position.to_string()),
            ("n_freqs_direction", e.n_freqs_direction.to_string()),
            ("include_input", e.include_input.to_string()),
            ("beta_min", format!("{:e}", self.beta_min)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::InvalidConfigValue {
                    key: k.to_string(),
                    reason: "missing from checkpoint".into(),
                })
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::InvalidConfigValue {
                key: k.into(),
                reason: format!("{e}"),
            })
        };
        Ok(Self {
            n_bins: num("n_bins")?,
            static_dim: num("static_dim")?,
            transient_dim: num("transient_dim")?,
            width: num("width")?,
            base_depth: num("base_depth")?,
            static_depth: num("static_depth")?,
            transient_depth: num("transient_depth")?,
            encoding: EncodingConfig {
                n_freqs_position: num("n_freqs_position")?,
                n_freqs_direction: num("n_freqs_direction")?,
                include_input: get("include_input")? == "true",
            },
            beta_min: get("beta_min")?.parse().map_err(|e| Error::InvalidConfigValue {
                key: "beta_min".into(),
                reason: format!("{e}"),
            })?,
        })
    }

    /// Reason the configuration cannot build a model, if any.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_bins < 2 {
            return Err("need at least two histogram bins".into());
        }
        if self.base_depth < 1 || self.static_depth < 2 || self.transient_depth < 1 {
            return Err("depths must be at least 1 (static head at least 2)".into());
        }
        if self.encoding.n_freqs_position < 1 || self.encoding.n_freqs_direction < 1 {
            return Err("encodings need at least one frequency".into());
        }
        if self.width == 0 || !(self.beta_min > 0.0) {
            return Err("width and beta_min must be positive".into());
        }
        Ok(())
    }

    pub fn position_encoding_len(&self) -> usize {
        encoded_len(3, self.encoding.n_freqs_position, self.encoding.include_input)
    }

    pub fn direction_encoding_len(&self) -> usize {
        encoded_len(3, self.encoding.n_freqs_direction, self.encoding.include_input)
    }
}

/// Static and transient conditioning vectors for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramEmbedding {
    pub static_vec: Vec<f64>,
    pub transient_vec: Vec<f64>,
}

impl HistogramEmbedding {
    pub fn zeros(cfg: &NerfConfig) -> Self {
        Self {
            static_vec: vec![0.0; cfg.static_dim],
            transient_vec: vec![0.0; cfg.transient_dim],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NerfIds {
    embed_static: Dense,
    embed_transient: Dense,
    base: Vec<Dense>,
    base_sigma: Dense,
    base_rgb: Dense,
    static_in: Dense,
    static_hidden: Vec<Dense>,
    static_sigma: Dense,
    static_color: Dense,
    static_color_out: Dense,
    transient_in: Dense,
    transient_hidden: Vec<Dense>,
    transient_out: Dense,
}

/// Base, static and transient field networks plus the histogram maps.
///
/// Parameter names start with `embed.`, `base.`, `static.` or
/// `transient.`, so callers can freeze or hash one part at a time.
#[derive(Clone, Debug)]
pub struct HistNerfModel {
    config: NerfConfig,
    pub params: ParamStore,
    ids: NerfIds,
}

/// Which heads to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Base,
    Static,
    All,
}

/// Per-point field outputs on a tape. Unevaluated heads are `None`.
pub struct FieldVars<'t> {
    pub sigma_b: Var<'t>,
    pub rgb_b: Var<'t>,
    pub z: Var<'t>,
    pub sigma_s: Option<Var<'t>>,
    pub c_s: Option<Var<'t>>,
    pub sigma_t: Option<Var<'t>>,
    pub c_t: Option<Var<'t>>,
    pub beta: Option<Var<'t>>,
}

/// Embeddings of a set of images on a tape, one row per image.
#[derive(Clone, Copy)]
pub struct EmbeddingVars<'t> {
    pub stat: Var<'t>,
    pub trans: Var<'t>,
}

/// Points to evaluate: encoded positions, encoded view directions shared by
/// runs of `dir_repeat` consecutive points, and the image each point
/// belongs to (selects its embedding row).
pub struct PointBatch<'t> {
    pub enc_x: Var<'t>,
    pub enc_d: Var<'t>,
    pub dir_repeat: usize,
    pub image_of_point: Vec<usize>,
}

impl HistNerfModel {
    pub fn new(config: NerfConfig, seed: u64) -> Self {
        if let Err(reason) = config.validate() {
            panic!("invalid NeRF config: {reason}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        let mut dense = |p: &mut ParamStore, name: &str, i: usize, o: usize| {
            let (w, b) = p.add_dense(name, i, o, &mut rng);
            Dense { w, b }
        };
        let embed_static = dense(&mut p, "embed.static", config.n_bins, config.static_dim);
        let embed_transient = dense(&mut p, "embed.transient", config.n_bins, config.transient_dim);

        let mut base = Vec::new();
        let mut fan_in = config.position_encoding_len();
        for i in 0..config.base_depth {
            base.push(dense(&mut p, &format!("base.l{i}"), fan_in, w));
            fan_in = w;
        }
        let base_sigma = dense(&mut p, "base.sigma", w, 1);
        let base_rgb = dense(&mut p, "base.rgb", w, 3);

        let static_in = dense(&mut p, "static.l0", w + config.static_dim, w);
        let static_hidden = (1..config.static_depth - 1)
            .map(|i| dense(&mut p, &format!("static.l{i}"), w, w))
            .collect();
        let static_sigma = dense(&mut p, "static.sigma", w, 1);
        let half = (w / 2).max(1);
        let static_color = dense(&mut p, "static.color", w + config.direction_encoding_len(), half);
        let static_color_out = dense(&mut p, "static.color_out", half, 3);

        let transient_in = dense(&mut p, "transient.l0", w + config.transient_dim, w);
        let transient_hidden = (1..config.transient_depth)
            .map(|i| dense(&mut p, &format!("transient.l{i}"), w, w))
            .collect();
        let transient_out = dense(&mut p, "transient.out", w, 5);

        // Start mostly empty, with a faint transient field.
        for (d, bias) in [(base_sigma, -2.0), (static_sigma, -2.0)] {
            p.get_mut(d.b).data_mut()[0] = bias;
        }
        p.get_mut(transient_out.b).data_mut()[0] = -5.0;
        for d in [base_sigma, base_rgb, static_sigma, static_color_out, transient_out] {
            let t = p.get_mut(d.w);
            *t = t.scale(0.1);
        }

        let ids = NerfIds {
            embed_static,
            embed_transient,
            base,
            base_sigma,
            base_rgb,
            static_in,
            static_hidden,
            static_sigma,
            static_color,
            static_color_out,
            transient_in,
            transient_hidden,
            transient_out,
        };
        Self {
            config,
            params: p,
            ids,
        }
    }

    pub fn config(&self) -> &NerfConfig {
        &self.config
    }

    /// Rebuilds a model around loaded parameters; names and shapes must
    /// match the architecture of `config`.
    pub fn from_params(config: NerfConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0);
        if model.params.names() != params.names() {
            return Err(Error::InvalidArgument("parameter names do not match the architecture".into()));
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.entries(),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
        .save(path)
    }

    /// Loads a checkpoint written by [`HistNerfModel::save`]. With `expected`,
    /// the stored architecture must match it.
    pub fn load(path: &Path, expected: Option<&NerfConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.kind),
            });
        }
        if let Some(cfg) = expected {
            ck.check_config(&cfg.entries())?;
        }
        let config = NerfConfig::from_entries(&ck.config)?;
        let mut params = ParamStore::new();
        for (name, t) in ck.tensors {
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("duplicate tensor {name}"),
                });
            }
            params.add(name, t);
        }
        Self::from_params(config, params).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// `[n, N_b]` stacked histograms.
    pub fn histogram_tensor(&self, hists: &[&LuminanceHistogram]) -> Result<Tensor> {
        let nb = self.config.n_bins;
        let mut data = Vec::with_capacity(hists.len() * nb);
        for h in hists {
            if h.n_bins() != nb {
                return Err(Error::BinCountMismatch {
                    expected: nb,
                    got: h.n_bins(),
                });
            }
            data.extend_from_slice(h.bins());
        }
        Ok(Tensor::new(&[hists.len(), nb], data))
    }

    /// Learned linear maps from histograms `[n, N_b]` to embeddings.
    pub fn embed_vars<'t>(&self, b: &Bound<'t>, hists: &Var<'t>) -> EmbeddingVars<'t> {
        let d = |d: Dense| hists.linear(&b.var(d.w), &b.var(d.b));
        EmbeddingVars {
            stat: d(self.ids.embed_static),
            trans: d(self.ids.embed_transient),
        }
    }

    pub fn embed_histogram(&self, h: &LuminanceHistogram) -> Result<HistogramEmbedding> {
        let t = self.histogram_tensor(&[h])?;
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let e = self.embed_vars(&b, &tape.constant(t));
        Ok(HistogramEmbedding {
            static_vec: e.stat.value().data().to_vec(),
            transient_vec: e.trans.value().data().to_vec(),
        })
    }

    /// Fixed embeddings as tape constants, one row each.
    pub fn embedding_constants<'t>(&self, tape: &'t Tape, embs: &[&HistogramEmbedding]) -> EmbeddingVars<'t> {
        let n = embs.len();
        let s: Vec<f64> = embs.iter().flat_map(|e| e.static_vec.iter().copied()).collect();
        let t: Vec<f64> = embs.iter().flat_map(|e| e.transient_vec.iter().copied()).collect();
        EmbeddingVars {
            stat: tape.constant(Tensor::new(&[n, self.config.static_dim], s)),
            trans: tape.constant(Tensor::new(&[n, self.config.transient_dim], t)),
        }
    }

    fn dense<'t>(b: &Bound<'t>, x: &Var<'t>, d: Dense) -> Var<'t> {
        x.linear(&b.var(d.w), &b.var(d.b))
    }

    /// Linear layer over `[x, y_image]` where the `y` part is computed once
    /// per image and gathered per point.
    fn conditioned<'t>(&self, b: &Bound<'t>, x: &Var<'t>, y: &Var<'t>, d: Dense, image_of_point: &[usize]) -> Var<'t> {
        let (xw, wy) = split_linear(b, x, d);
        xw.add(&y.matmul(&wy).select_rows(image_of_point))
    }

    pub fn field<'t>(&self, b: &Bound<'t>, emb: &EmbeddingVars<'t>, pts: &PointBatch<'t>, heads: Heads) -> FieldVars<'t> {
        let ids = &self.ids;
        let mut h = pts.enc_x;
        for d in &ids.base {
            h = Self::dense(b, &h, *d).relu();
        }
        let z = h;
        let sigma_b = Self::dense(b, &z, ids.base_sigma).softplus();
        let rgb_b = Self::dense(b, &z, ids.base_rgb).sigmoid();
        let mut out = FieldVars {
            sigma_b,
            rgb_b,
            z,
            sigma_s: None,
            c_s: None,
            sigma_t: None,
            c_t: None,
            beta: None,
        };
        if heads == Heads::Base {
            return out;
        }

        let mut hs = self.conditioned(b, &z, &emb.stat, ids.static_in, &pts.image_of_point).relu();
        for d in &ids.static_hidden {
            hs = Self::dense(b, &hs, *d).relu();
        }
        out.sigma_s = Some(Self::dense(b, &hs, ids.static_sigma).softplus());
        // Color layer over [hs, enc_d]; the direction part is shared along a ray.
        let (hw, wd) = split_linear(b, &hs, ids.static_color);
        let dw = pts.enc_d.matmul(&wd);
        let dw = if pts.dir_repeat > 1 { dw.repeat_rows(pts.dir_repeat) } else { dw };
        let hc = hw.add(&dw).relu();
        out.c_s = Some(Self::dense(b, &hc, ids.static_color_out).sigmoid());
        if heads == Heads::Static {
            return out;
        }

        let mut ht = self.conditioned(b, &z, &emb.trans, ids.transient_in, &pts.image_of_point).relu();
        for d in &ids.transient_hidden {
            ht = Self::dense(b, &ht, *d).relu();
        }
        let o = Self::dense(b, &ht, ids.transient_out);
        out.sigma_t = Some(o.slice_last(0, 1).softplus());
        out.c_t = Some(o.slice_last(1, 4).sigmoid());
        out.beta = Some(o.slice_last(4, 5).softplus().add_scalar(self.config.beta_min));
        out
    }
}

/// For a layer over `[x, extra]`: the affine part on `x`, and the weight
/// rows that act on `extra`.
fn split_linear<'t>(b: &Bound<'t>, x: &Var<'t>, d: Dense) -> (Var<'t>, Var<'t>) {
    let w = b.var(d.w);
    let (k, rows) = (x.shape()[1], w.shape()[0]);
    let wx = w.select_rows(&(0..k).collect::<Vec<_>>());
    let wy = w.select_rows(&(k..rows).collect::<Vec<_>>());
    (x.linear(&wx, &b.var(d.b)), wy)
}

/// Plain per-point outputs of [`query_field`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma_b: Vec<f64>,
    pub z: Tensor,
    pub sigma_s: Vec<f64>,
    pub c_s: Tensor,
    pub sigma_t: Vec<f64>,
    pub c_t: Tensor,
    pub beta: Vec<f64>,
}

/// Evaluates every head at `points` (`[n, 3]`) seen along unit `directions`
/// (`[n, 3]`) under one image embedding.
pub fn query_field(model: &HistNerfModel, points: &Tensor, directions: &Tensor, emb: &HistogramEmbedding) -> FieldOutput {
    let cfg = model.config();
    let n = points.rows();
    let tape = Tape::new();
    let b = model.params.bind_frozen(&tape);
    let e = model.embedding_constants(&tape, &[emb]);
    let pts = PointBatch {
        enc_x: tape
            .constant(points.clone())
            .positional_encode(cfg.encoding.n_freqs_position, cfg.encoding.include_input),
        enc_d: tape
            .constant(directions.clone())
            .positional_encode(cfg.encoding.n_freqs_direction, cfg.encoding.include_input),
        dir_repeat: 1,
        image_of_point: vec![0; n],
    };
    let f = model.field(&b, &e, &pts, Heads::All);
    let col = |v: Option<Var>| v.expect("all heads evaluated").value().data().to_vec();
    FieldOutput {
        sigma_b: f.sigma_b.value().data().to_vec(),
        z: f.z.value().as_ref().clone(),
        sigma_s: col(f.sigma_s),
        c_s: f.c_s.unwrap().value().as_ref().clone(),
        sigma_t: col(f.sigma_t),
        c_t: f.c_t.unwrap().value().as_ref().clone(),
        beta: col(f.beta),
    }
}
