//! Unified vector encoder.
//!
//! Every instance becomes a block of tokens: one `[VEC]` token followed by
//! one token per point. Point tokens embed Fourier features of position and
//! direction, projected to the model width; every token also receives a
//! learnable instance-slot, element-type and 2D (slot, index) position
//! embedding. `m_intra` attention layers run with a block-diagonal mask (each
//! instance attends only to itself), then `n_inter` layers run across all
//! valid tokens. The `[VEC]` outputs are instance features, the point outputs
//! point features.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::checkpoint::{load_bundle, CheckpointError};
use crate::autodiff::{Array, AutodiffError, Graph, ParamStore, Var, MASK_NEG};
use crate::vector::{ElementType, PerceptionWindow, VectorMap};

#[derive(Debug, Error, PartialEq)]
pub enum UveError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("map has {found} instances but the encoder holds at most {capacity}")]
    TooManyInstances { found: usize, capacity: usize },
    #[error("instance {instance} has {found} points but the encoder holds at most {capacity}")]
    TooManyPoints {
        instance: usize,
        found: usize,
        capacity: usize,
    },
    #[error("instances must share one point count to form a feature bundle (found {0} and {1})")]
    RaggedInstances(usize, usize),
    #[error("encoder input must be an ego-frame map")]
    NotEgo,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, UveError>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UveConfig {
    pub m_intra: usize,
    pub n_inter: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fourier_bands: usize,
    pub max_instances: usize,
    pub max_points: usize,
    pub n_types: usize,
    /// Perception window `[x_min, x_max, y_min, y_max]` used to normalize
    /// positions before the Fourier map.
    pub window: [f64; 4],
}

impl Default for UveConfig {
    fn default() -> Self {
        let w = PerceptionWindow::default();
        Self {
            m_intra: 2,
            n_inter: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            fourier_bands: 8,
            max_instances: 32,
            max_points: 20,
            n_types: ElementType::COUNT,
            window: [w.x_min, w.x_max, w.y_min, w.y_max],
        }
    }
}

impl UveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UveError::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.fourier_bands == 0 {
            return bad("fourier_bands must be at least 1");
        }
        if self.ffn_dim == 0 || self.max_instances == 0 || self.max_points < 2 {
            return bad("ffn_dim, max_instances must be positive and max_points >= 2");
        }
        if self.n_types < ElementType::COUNT {
            return bad("n_types must cover every element type");
        }
        self.perception_window()?;
        Ok(())
    }

    pub fn perception_window(&self) -> Result<PerceptionWindow> {
        let [a, b, c, d] = self.window;
        PerceptionWindow::new(a, b, c, d).map_err(|e| UveError::Config(e.to_string()))
    }

    /// Width of the concatenated position + direction Fourier features.
    pub fn feature_dim(&self) -> usize {
        8 * self.fourier_bands
    }

    fn positions_per_slot(&self) -> usize {
        self.max_points + 1
    }
}

/// Writes `[sin(2^k π u) for k] ++ [cos(2^k π u) for k]` into `out`.
pub fn fourier_features(u: f64, bands: usize, out: &mut Vec<f64>) {
    let freqs = (0..bands).map(|k| (1u64 << k) as f64 * PI);
    out.extend(freqs.clone().map(|f| (f * u).sin()));
    out.extend(freqs.map(|f| (f * u).cos()));
}

/// Flattened token layout of one map plus the constant per-token inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// Instance slot of every token.
    pub instance: Vec<usize>,
    /// 0 for `[VEC]`, `j + 1` for the j-th point.
    pub position: Vec<usize>,
    pub is_vec: Vec<bool>,
    pub valid: Vec<bool>,
    pub element_type: Vec<usize>,
    /// `[tokens, feature_dim]`; zero rows for `[VEC]` and padding.
    pub features: Array,
    /// Point count of each instance, in slot order.
    pub points_per_instance: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.points_per_instance.len()
    }

    pub fn vec_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| self.valid[t] && self.is_vec[t])
            .collect()
    }

    pub fn point_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| self.valid[t] && !self.is_vec[t])
            .collect()
    }

    /// Appends `count` invalid tokens. They are excluded from every mask and
    /// from the feature outputs.
    pub fn with_padding(mut self, count: usize) -> Self {
        let width = self.features.last_dim();
        let mut data = self.features.into_data();
        data.resize(data.len() + count * width, 0.0);
        let rows = self.instance.len() + count;
        self.features = Array::from_vec(&[rows, width], data).expect("sizes agree");
        for _ in 0..count {
            self.instance.push(0);
            self.position.push(0);
            self.is_vec.push(false);
            self.valid.push(false);
            self.element_type.push(0);
        }
        self
    }
}

/// Builds the token layout for an ego-frame map.
pub fn tokenize(map: &VectorMap, config: &UveConfig) -> Result<TokenSequence> {
    if !map.frame.is_ego() {
        return Err(UveError::NotEgo);
    }
    if map.instances.len() > config.max_instances {
        return Err(UveError::TooManyInstances {
            found: map.instances.len(),
            capacity: config.max_instances,
        });
    }
    let window = config.perception_window()?;
    let bands = config.fourier_bands;
    let width = config.feature_dim();
    let mut seq = TokenSequence {
        instance: Vec::new(),
        position: Vec::new(),
        is_vec: Vec::new(),
        valid: Vec::new(),
        element_type: Vec::new(),
        features: Array::zeros(&[0, width]),
        points_per_instance: Vec::new(),
    };
    let mut feats = Vec::new();
    for (slot, inst) in map.instances.iter().enumerate() {
        if inst.len() > config.max_points {
            return Err(UveError::TooManyPoints {
                instance: slot,
                found: inst.len(),
                capacity: config.max_points,
            });
        }
        let code = inst.element_type().code();
        seq.instance.push(slot);
        seq.position.push(0);
        seq.is_vec.push(true);
        seq.valid.push(true);
        seq.element_type.push(code);
        feats.resize(feats.len() + width, 0.0);
        for (j, p) in inst.points().iter().enumerate() {
            let (u, v) = window.normalize(p.x, p.y);
            fourier_features(u, bands, &mut feats);
            fourier_features(v, bands, &mut feats);
            fourier_features(p.vx, bands, &mut feats);
            fourier_features(p.vy, bands, &mut feats);
            seq.instance.push(slot);
            seq.position.push(j + 1);
            seq.is_vec.push(false);
            seq.valid.push(true);
            seq.element_type.push(code);
        }
        seq.points_per_instance.push(inst.len());
    }
    let rows = seq.instance.len();
    seq.features = Array::from_vec(&[rows, width], feats).map_err(UveError::from)?;
    Ok(seq)
}

/// Additive attention masks `(intra, inter)`, each `[tokens, tokens]` with
/// entries 0 (may attend) or [`MASK_NEG`].
pub fn build_attention_masks(tokens: &TokenSequence) -> (Array, Array) {
    let t = tokens.len();
    let mut intra = Array::full(&[t, t], MASK_NEG);
    let mut inter = Array::full(&[t, t], MASK_NEG);
    for i in 0..t {
        if !tokens.valid[i] {
            continue;
        }
        for j in 0..t {
            if !tokens.valid[j] {
                continue;
            }
            inter.data_mut()[i * t + j] = 0.0;
            if tokens.instance[i] == tokens.instance[j] {
                intra.data_mut()[i * t + j] = 0.0;
            }
        }
    }
    (intra, inter)
}

/// Encoder outputs for one map.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatureBundle {
    /// `[instances, dim]`, from the `[VEC]` tokens.
    pub f_ins: Array,
    /// `[instances, points, dim]`.
    pub f_pt: Array,
}

impl PriorFeatureBundle {
    pub fn empty(dim: usize) -> Self {
        Self {
            f_ins: Array::zeros(&[0, dim]),
            f_pt: Array::zeros(&[0, 0, dim]),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.f_ins.shape()[0]
    }

    pub fn points_per_instance(&self) -> usize {
        self.f_pt.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.f_ins.shape()[1]
    }

    pub fn instance_feature(&self, i: usize) -> &[f64] {
        self.f_ins.row(i)
    }

    pub fn point_feature(&self, i: usize, j: usize) -> &[f64] {
        let (n, d) = (self.f_pt.shape()[1], self.f_pt.shape()[2]);
        &self.f_pt.data()[(i * n + j) * d..(i * n + j + 1) * d]
    }
}

/// Parameter naming and initialization for the encoder and its coordinate head.
#[derive(Debug, Clone, PartialEq)]
pub struct UveModel {
    pub config: UveConfig,
}

impl UveModel {
    pub fn new(config: UveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn layer_prefixes(&self) -> Vec<String> {
        let intra = (0..self.config.m_intra).map(|l| format!("uve.intra.{l}"));
        let inter = (0..self.config.n_inter).map(|l| format!("uve.inter.{l}"));
        intra.chain(inter).collect()
    }

    /// Fresh parameters from `seed`. Weight matrices use N(0, 1/fan_in);
    /// residual output projections are further scaled by 1/sqrt(2·layers).
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(seed);
        let d = c.dim;
        let layers = (c.m_intra + c.n_inter).max(1) as f64;
        let resid = 1.0 / (2.0 * layers).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        s.insert_normal("uve.embed.proj.w", &[c.feature_dim(), d], fan(c.feature_dim()), &mut rng)?;
        s.insert_normal("uve.embed.kind", &[2, d], 0.02, &mut rng)?;
        s.insert_normal("uve.embed.instance", &[c.max_instances, d], 0.02, &mut rng)?;
        s.insert_normal("uve.embed.type", &[c.n_types, d], 0.02, &mut rng)?;
        s.insert_normal(
            "uve.embed.position",
            &[c.max_instances * c.positions_per_slot(), d],
            0.02,
            &mut rng,
        )?;
        for prefix in self.layer_prefixes() {
            s.insert(&format!("{prefix}.ln1.g"), Array::full(&[d], 1.0))?;
            s.insert(&format!("{prefix}.ln1.b"), Array::zeros(&[d]))?;
            for name in ["q", "k", "v"] {
                s.insert_normal(&format!("{prefix}.attn.{name}.w"), &[d, d], fan(d), &mut rng)?;
                // a key bias shifts every logit of a query equally and softmax
                // cancels it, so keys are projected without one
                if name != "k" {
                    s.insert(&format!("{prefix}.attn.{name}.b"), Array::zeros(&[d]))?;
                }
            }
            s.insert_normal(&format!("{prefix}.attn.o.w"), &[d, d], fan(d) * resid, &mut rng)?;
            s.insert(&format!("{prefix}.attn.o.b"), Array::zeros(&[d]))?;
            s.insert(&format!("{prefix}.ln2.g"), Array::full(&[d], 1.0))?;
            s.insert(&format!("{prefix}.ln2.b"), Array::zeros(&[d]))?;
            s.insert_normal(&format!("{prefix}.ffn.1.w"), &[d, c.ffn_dim], fan(d), &mut rng)?;
            s.insert(&format!("{prefix}.ffn.1.b"), Array::zeros(&[c.ffn_dim]))?;
            s.insert_normal(
                &format!("{prefix}.ffn.2.w"),
                &[c.ffn_dim, d],
                fan(c.ffn_dim) * resid,
                &mut rng,
            )?;
            s.insert(&format!("{prefix}.ffn.2.b"), Array::zeros(&[d]))?;
        }
        s.insert("uve.final_ln.g", Array::full(&[d], 1.0))?;
        s.insert("uve.final_ln.b", Array::zeros(&[d]))?;
        s.insert_normal("head.1.w", &[d, c.ffn_dim], fan(d), &mut rng)?;
        s.insert("head.1.b", Array::zeros(&[c.ffn_dim]))?;
        s.insert_normal("head.2.w", &[c.ffn_dim, 2], fan(c.ffn_dim), &mut rng)?;
        s.insert("head.2.b", Array::zeros(&[2]))?;
        Ok(s)
    }

    /// Hybrid prior embedding of every token, `[tokens, dim]`.
    pub fn embed(&self, g: &mut Graph, tokens: &TokenSequence, params: &ParamStore) -> Result<Var> {
        let c = &self.config;
        let feats = g.constant(tokens.features.clone())?;
        let proj = g.param(params, "uve.embed.proj.w")?;
        let mut x = g.matmul(feats, proj)?;

        let kind: Vec<usize> = tokens.is_vec.iter().map(|&v| usize::from(v)).collect();
        let slot_pos: Vec<usize> = tokens
            .instance
            .iter()
            .zip(&tokens.position)
            .map(|(&i, &p)| i * c.positions_per_slot() + p)
            .collect();
        for (name, idx) in [
            ("uve.embed.kind", kind),
            ("uve.embed.instance", tokens.instance.clone()),
            ("uve.embed.type", tokens.element_type.clone()),
            ("uve.embed.position", slot_pos),
        ] {
            let table = g.param(params, name)?;
            let e = g.embedding_lookup(table, &idx)?;
            x = g.add(x, e)?;
        }
        Ok(x)
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, params: &ParamStore, prefix: &str) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(params, &format!("{prefix}.g"))?;
        let bias = g.param(params, &format!("{prefix}.b"))?;
        let n = g.mul(n, gain)?;
        Ok(g.add(n, bias)?)
    }

    fn linear(&self, g: &mut Graph, x: Var, params: &ParamStore, prefix: &str) -> Result<Var> {
        let w = g.param(params, &format!("{prefix}.w"))?;
        let b = g.param(params, &format!("{prefix}.b"))?;
        Ok(g.linear(x, w, b)?)
    }

    /// One pre-norm block: masked multi-head self-attention then a GELU
    /// feed-forward layer, each with a residual connection.
    fn block(&self, g: &mut Graph, x: Var, mask: &Array, params: &ParamStore, prefix: &str) -> Result<Var> {
        let heads = self.config.heads;
        let scale = 1.0 / ((self.config.dim / heads) as f64).sqrt();
        let h = self.affine_norm(g, x, params, &format!("{prefix}.ln1"))?;
        let q = self.linear(g, h, params, &format!("{prefix}.attn.q"))?;
        let q = g.scale(q, scale)?;
        let kw = g.param(params, &format!("{prefix}.attn.k.w"))?;
        let k = g.matmul(h, kw)?;
        let v = self.linear(g, h, params, &format!("{prefix}.attn.v"))?;
        let (qs, ks, vs) = (
            g.split_last_dim(q, heads)?,
            g.split_last_dim(k, heads)?,
            g.split_last_dim(v, heads)?,
        );
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let scores = g.matmul_bt(qs[i], ks[i])?;
            let weights = g.softmax_last_dim(scores, Some(mask))?;
            outs.push(g.matmul(weights, vs[i])?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_last_dim(&outs)? };
        let attn = self.linear(g, cat, params, &format!("{prefix}.attn.o"))?;
        let x = g.add(x, attn)?;

        let h = self.affine_norm(g, x, params, &format!("{prefix}.ln2"))?;
        let f = self.linear(g, h, params, &format!("{prefix}.ffn.1"))?;
        let f = g.gelu(f)?;
        let f = self.linear(g, f, params, &format!("{prefix}.ffn.2"))?;
        Ok(g.add(x, f)?)
    }

    /// Runs the intra then inter layers and the final norm over embedded tokens.
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        tokens: &TokenSequence,
        embedded: Var,
        params: &ParamStore,
    ) -> Result<Var> {
        let (intra, inter) = build_attention_masks(tokens);
        let mut x = embedded;
        for l in 0..self.config.m_intra {
            x = self.block(g, x, &intra, params, &format!("uve.intra.{l}"))?;
        }
        for l in 0..self.config.n_inter {
            x = self.block(g, x, &inter, params, &format!("uve.inter.{l}"))?;
        }
        self.affine_norm(g, x, params, "uve.final_ln")
    }

    /// Tokenize, embed and encode a map inside `g`. Returns the token layout
    /// and the `[tokens, dim]` output states.
    pub fn forward(
        &self,
        g: &mut Graph,
        map: &VectorMap,
        params: &ParamStore,
    ) -> Result<(TokenSequence, Var)> {
        let tokens = tokenize(map, &self.config)?;
        let embedded = self.embed(g, &tokens, params)?;
        let out = self.encode_tokens(g, &tokens, embedded, params)?;
        Ok((tokens, out))
    }

    /// Encodes a map into instance and point features.
    pub fn encode(&self, map: &VectorMap, params: &ParamStore) -> Result<PriorFeatureBundle> {
        let d = self.config.dim;
        if map.instances.is_empty() {
            if !map.frame.is_ego() {
                return Err(UveError::NotEgo);
            }
            return Ok(PriorFeatureBundle::empty(d));
        }
        let n = map.instances[0].len();
        if let Some(other) = map.instances.iter().map(|i| i.len()).find(|&k| k != n) {
            return Err(UveError::RaggedInstances(n, other));
        }
        let mut g = Graph::new();
        let (tokens, out) = self.forward(&mut g, map, params)?;
        let m = tokens.num_instances();
        let out = g.value(out);
        let mut f_ins = Vec::with_capacity(m * d);
        for t in tokens.vec_indices() {
            f_ins.extend_from_slice(out.row(t));
        }
        let mut f_pt = Vec::with_capacity(m * n * d);
        for t in tokens.point_indices() {
            f_pt.extend_from_slice(out.row(t));
        }
        Ok(PriorFeatureBundle {
            f_ins: Array::from_vec(&[m, d], f_ins)?,
            f_pt: Array::from_vec(&[m, n, d], f_pt)?,
        })
    }

    /// Two-layer coordinate head over the point rows of `states`. Returns
    /// `[points, 2]` in meters: the head predicts window-normalized
    /// coordinates which are mapped back through the perception window.
    pub fn decode_coordinates(
        &self,
        g: &mut Graph,
        states: Var,
        tokens: &TokenSequence,
        params: &ParamStore,
    ) -> Result<Var> {
        let pts = g.embedding_lookup(states, &tokens.point_indices())?;
        self.decode_points(g, pts, params)
    }

    /// Coordinate head applied to an explicit `[points, dim]` feature matrix.
    pub fn decode_points(&self, g: &mut Graph, pts: Var, params: &ParamStore) -> Result<Var> {
        let h = self.linear(g, pts, params, "head.1")?;
        let h = g.gelu(h)?;
        let out = self.linear(g, h, params, "head.2")?;
        let w = self.config.perception_window()?;
        let (cx, cy) = w.center();
        let half = g.constant(Array::from_vec(&[2], vec![0.5 * w.width(), 0.5 * w.height()])?)?;
        let center = g.constant(Array::from_vec(&[2], vec![cx, cy])?)?;
        let out = g.mul(out, half)?;
        Ok(g.add(out, center)?)
    }

    /// Coordinate head over a bundle's point features: `[m', n', 2]` meters.
    pub fn decode_bundle(&self, bundle: &PriorFeatureBundle, params: &ParamStore) -> Result<Array> {
        let (m, n) = (bundle.num_instances(), bundle.points_per_instance());
        if m * n == 0 {
            return Ok(Array::zeros(&[m, n, 2]));
        }
        let mut g = Graph::new();
        let flat = bundle.f_pt.clone().reshape(&[m * n, bundle.dim()])?;
        let pts = g.constant(flat)?;
        let out = self.decode_points(&mut g, pts, params)?;
        Ok(g.value(out).clone().reshape(&[m, n, 2])?)
    }

    /// Encode + decode without gradient bookkeeping: `[points, 2]` meters in
    /// instance-major order.
    pub fn reconstruct(&self, map: &VectorMap, params: &ParamStore) -> Result<Array> {
        if map.instances.is_empty() {
            return Ok(Array::zeros(&[0, 2]));
        }
        let mut g = Graph::new();
        let (tokens, states) = self.forward(&mut g, map, params)?;
        let pred = self.decode_coordinates(&mut g, states, &tokens, params)?;
        Ok(g.value(pred).clone())
    }
}

impl UveModel {
    /// Writes parameter values with this config in the checkpoint header.
    pub fn save(&self, path: impl AsRef<Path>, params: &ParamStore) -> std::result::Result<(), CheckpointError> {
        let config = serde_json::to_value(&self.config).map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.save(path, &config)
    }

    /// Reads a checkpoint written by [`UveModel::save`].
    pub fn load(path: impl AsRef<Path>) -> std::result::Result<(Self, ParamStore), CheckpointError> {
        let bundle = load_bundle(path)?;
        let config: UveConfig = serde_json::from_value(bundle.config.clone())
            .map_err(|e| CheckpointError::Header(format!("encoder config: {e}")))?;
        let model = Self::new(config).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut params = model
            .init_params(bundle.seed)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.load_values(&bundle)?;
        Ok((model, params))
    }
}

/// Replaces the point coordinates of `map` with a `[points, 2]` prediction.
pub fn apply_coordinates(map: &VectorMap, coords: &Array) -> std::result::Result<VectorMap, crate::vector::VectorError> {
    let mut k = 0;
    let mut instances = Vec::with_capacity(map.instances.len());
    for inst in &map.instances {
        let moved = inst.map_points(|p| {
            let row = coords.row(k);
            k += 1;
            crate::vector::VectorPoint {
                x: row[0],
                y: row[1],
                ..*p
            }
        })?;
        instances.push(crate::vector::compute_directions(&moved));
    }
    Ok(VectorMap {
        instances,
        ..map.clone()
    })
}
