//! The full forward pass: position injection, local propagation, position
//! re-injection, global attention, local/global mixing and the mean
//! readout. Also scoring and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    default_input_scale, exact_attention_on_tape, kernelized_attention_on_tape, AttentionConfig,
    AttentionProjections, RandomFeatureMap,
};
use crate::backbone::{propagate_layer, readout, BackboneVariant, NormalizedAdjacency};
use crate::data::BipartiteGraph;
use crate::encoding::{EncodingConfig, PositionalEncodingSet};
use crate::error::{Error, Result};
use crate::numerics::dense::norm2;
use crate::numerics::{DenseMatrix, EigenOptions, PageRankOptions, ParamId, ParamStore, Tape, Var};

const MAGIC: &[u8; 8] = b"PGTRCKPT";
const VERSION: u32 = 1;
const EMBEDDING_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgtrConfig {
    pub dim: usize,
    pub layers: usize,
    /// Weight of the positions added to the initial embeddings.
    pub lambda1: f64,
    /// Weight of the positions re-added before attention.
    pub lambda2: f64,
    /// Share of the global (attention) branch in each layer.
    pub lambda3: f64,
    pub tau: f64,
    pub encoding: EncodingConfig,
    pub attention: AttentionConfig,
    pub backbone: BackboneVariant,
    pub seed: u64,
}

impl Default for PgtrConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            tau: 0.2,
            encoding: EncodingConfig::default(),
            attention: AttentionConfig::default(),
            backbone: BackboneVariant::LightGcn,
            seed: 7,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

impl PgtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(
                "dim and layers must be positive".into(),
            ));
        }
        unit_interval("lambda1", self.lambda1)?;
        unit_interval("lambda2", self.lambda2)?;
        unit_interval("lambda3", self.lambda3)?;
        unit_interval("lambda_c", self.encoding.lambda_c)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        let e = &self.encoding;
        if e.flags.spectral && e.h_c == 0 {
            return Err(Error::InvalidArgument("hc must be positive".into()));
        }
        if e.flags.degree && (e.h_d == 0 || e.n_d == 0) {
            return Err(Error::InvalidArgument("hd and nd must be positive".into()));
        }
        if e.flags.pagerank && (e.h_r == 0 || e.n_r == 0) {
            return Err(Error::InvalidArgument("hr and nr must be positive".into()));
        }
        if e.flags.node_type && e.h_y == 0 {
            return Err(Error::InvalidArgument("hy must be positive".into()));
        }
        if matches!(self.attention.input_scale, Some(s) if !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "attention input scale must be positive".into(),
            ));
        }
        if self.attention.features == 0 {
            return Err(Error::InvalidArgument(
                "feature count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable state plus the fixed graph-derived parts.
#[derive(Clone, Debug)]
pub struct PgtrModel {
    config: PgtrConfig,
    adjacency: NormalizedAdjacency,
    store: ParamStore,
    embedding: ParamId,
    encodings: PositionalEncodingSet,
    feature_maps: Vec<RandomFeatureMap>,
    projections: Vec<[ParamId; 3]>,
    transforms: Vec<ParamId>,
}

impl PgtrModel {
    pub fn new(graph: &BipartiteGraph, config: &PgtrConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut store = ParamStore::new();

        let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
        let table = DenseMatrix::from_fn(graph.n_nodes(), d, |_, _| normal.sample(&mut rng));
        let embedding = store.add("embedding", table, true);

        let eigen = EigenOptions {
            seed: rng.gen(),
            ..EigenOptions::default()
        };
        let encodings = PositionalEncodingSet::build(
            graph,
            &config.encoding,
            d,
            &mut store,
            rng.gen(),
            &eigen,
            &PageRankOptions::default(),
        )?;

        let feature_maps = (0..config.layers)
            .map(|_| RandomFeatureMap::new(d, config.attention.features, rng.gen()))
            .collect();

        let bound = (3.0 / d as f64).sqrt();
        let square = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            let m = DenseMatrix::from_fn(d, d, |_, _| rng.gen_range(-bound..=bound));
            store.add(name, m, true)
        };
        let mut projections = Vec::new();
        if config.attention.use_projections {
            for l in 0..config.layers {
                projections.push([
                    square(&mut store, format!("attn.{l}.query"), &mut rng),
                    square(&mut store, format!("attn.{l}.key"), &mut rng),
                    square(&mut store, format!("attn.{l}.value"), &mut rng),
                ]);
            }
        }
        let mut transforms = Vec::new();
        if config.backbone == BackboneVariant::TransformGcn {
            for l in 0..config.layers {
                transforms.push(square(&mut store, format!("gcn.{l}.weight"), &mut rng));
            }
        }

        Ok(Self {
            config: config.clone(),
            adjacency: NormalizedAdjacency::new(graph),
            store,
            embedding,
            encodings,
            feature_maps,
            projections,
            transforms,
        })
    }

    pub fn config(&self) -> &PgtrConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.encodings.n_users
    }

    pub fn n_items(&self) -> usize {
        self.encodings.n_items
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn encodings(&self) -> &PositionalEncodingSet {
        &self.encodings
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn feature_maps(&self) -> &[RandomFeatureMap] {
        &self.feature_maps
    }

    /// Trainable scalars beyond the embedding table.
    pub fn count_added_parameters(&self) -> usize {
        self.store
            .iter()
            .filter(|(id, p)| *id != self.embedding && p.trainable)
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Records the forward pass on `tape` and returns the final
    /// `(N+M) x d` table.
    pub fn forward(&self, tape: &mut Tape) -> Result<Var> {
        let cfg = &self.config;
        let positions = self.encodings.positions(tape)?;
        let inject = |tape: &mut Tape, h: Var, weight: f64| -> Result<Var> {
            match positions {
                Some(p) if weight != 0.0 => {
                    let scaled = if weight == 1.0 {
                        p
                    } else {
                        tape.scale(p, weight)?
                    };
                    tape.add(h, scaled)
                }
                _ => Ok(h),
            }
        };

        let e = tape.param(self.embedding)?;
        let h0 = inject(tape, e, cfg.lambda1)?;
        let mut layers = vec![h0];
        let mut h = h0;
        let input_scale = cfg
            .attention
            .input_scale
            .unwrap_or_else(|| default_input_scale(cfg.dim));
        for l in 0..cfg.layers {
            let weight = match self.transforms.get(l) {
                Some(&w) => Some(tape.param(w)?),
                None => None,
            };
            let local = propagate_layer(tape, &self.adjacency, cfg.backbone, h, weight)?;
            h = if cfg.lambda3 == 0.0 {
                local
            } else {
                let hat = inject(tape, local, cfg.lambda2)?;
                let global = if cfg.attention.exact {
                    exact_attention_on_tape(tape, hat, input_scale)?
                } else {
                    let proj = match self.projections.get(l) {
                        Some(&[q, k, v]) => Some(AttentionProjections {
                            query: tape.param(q)?,
                            key: tape.param(k)?,
                            value: tape.param(v)?,
                        }),
                        None => None,
                    };
                    kernelized_attention_on_tape(
                        tape,
                        hat,
                        &self.feature_maps[l],
                        input_scale,
                        proj,
                    )?
                };
                if cfg.lambda3 == 1.0 {
                    global
                } else {
                    let a = tape.scale(local, 1.0 - cfg.lambda3)?;
                    let b = tape.scale(global, cfg.lambda3)?;
                    tape.add(a, b)?
                }
            };
            layers.push(h);
        }
        readout(tape, &layers)
    }

    /// The final node table under the current parameters.
    pub fn final_table(&self) -> Result<DenseMatrix> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape)?;
        Ok(tape.value(out).clone())
    }

    /// Current parameter values in store order.
    pub fn snapshot(&self) -> Vec<DenseMatrix> {
        self.store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[DenseMatrix]) {
        assert_eq!(
            snapshot.len(),
            self.store.len(),
            "snapshot from another model"
        );
        for (p, v) in self.store.iter_mut().zip(snapshot) {
            assert_eq!(
                p.value.shape(),
                v.shape(),
                "snapshot shape mismatch for {}",
                p.name
            );
            p.value = v.clone();
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config)?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.feature_maps.len() as u32).to_le_bytes())?;
        for rf in &self.feature_maps {
            w.write_all(&rf.seed().to_le_bytes())?;
        }
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (_, p) in self.store.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Rebuilds a model for `graph` from a checkpoint written by
    /// [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(path: impl AsRef<Path>, graph: &BipartiteGraph) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r).map_err(|e| Error::io(path, e))? as usize;
        let mut config = vec![0u8; len];
        r.read_exact(&mut config).map_err(|e| Error::io(path, e))?;
        let config: PgtrConfig = serde_json::from_slice(&config)?;
        let mut model = Self::new(graph, &config)?;

        let n_maps = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
        if n_maps != config.layers {
            return Err(bad("feature map count does not match the layer count"));
        }
        for rf in model.feature_maps.iter_mut() {
            let seed = read_u64(&mut r).map_err(|e| Error::io(path, e))?;
            *rf = RandomFeatureMap::new(config.dim, config.attention.features, seed);
        }

        let n_params = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
        if n_params != model.store.len() {
            return Err(bad(&format!(
                "expected {} parameter blocks, found {n_params}",
                model.store.len()
            )));
        }
        for _ in 0..n_params {
            let name_len = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
            let rows = read_u64(&mut r).map_err(|e| Error::io(path, e))? as usize;
            let cols = read_u64(&mut r).map_err(|e| Error::io(path, e))? as usize;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| bad(&format!("unknown parameter `{name}`")))?;
            if model.store.value(id).shape() != (rows, cols) {
                return Err(bad(&format!("shape mismatch for `{name}`")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                data.push(f64::from_le_bytes(buf));
            }
            model.store.get_mut(id).value = DenseMatrix::from_vec(rows, cols, data);
        }
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Cosine similarity of a user row and an item row divided by `tau`.
pub fn score(
    table: &DenseMatrix,
    n_users: usize,
    user: usize,
    item: usize,
    tau: f64,
) -> Result<f64> {
    let u = table.row(user);
    let i = table.row(n_users + item);
    let (nu, ni) = (norm2(u), norm2(i));
    if nu == 0.0 {
        return Err(Error::ZeroNorm { node: user });
    }
    if ni == 0.0 {
        return Err(Error::ZeroNorm {
            node: n_users + item,
        });
    }
    Ok(crate::numerics::dense::dot(u, i) / (nu * ni) / tau)
}
