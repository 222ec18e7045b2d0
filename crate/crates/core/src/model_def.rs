//! Text definitions of toy bundles and adapters.
//!
//! ```text
//! # comment
//! tokens 4
//! input 8
//! cond 4
//! latent 8
//! steps 2
//! seed 7
//! noise 1.0
//! encoder linear 16 silu
//! encoder linear 8
//! backbone lora 16 rank=4 silu
//! backbone lora 8 rank=4 residual
//! decoder linear 16 silu
//! decoder linear 8
//! adapter style-a seed=11 scale=0.2
//! adapter fragile seed=12 scale=0.2 outlier=50
//! ```
//!
//! Activations are `[features × tokens]`. The backbone sees
//! `concat(latent, cond)`; `residual` adds the backbone's latent input to
//! the layer output. Weights are drawn from `N(0, 1/d_in)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LoRAAdapter, LoraFactors, ModelBundle, Op, Sample, TensorId};
use crate::rng::Prng;
use crate::tensor::ActKind;

pub const ENCODER_BASE: u32 = 0;
pub const BACKBONE_BASE: u32 = 1_000_000;
pub const DECODER_BASE: u32 = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub out: usize,
    pub act: Option<ActKind>,
    /// `Some(r_max)` makes this an adapter-capable layer.
    pub lora_rank: Option<usize>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDef {
    pub id: String,
    pub seed: u64,
    pub scale: f32,
    pub rank: Option<usize>,
    pub alpha: f32,
    /// Multiplies the first row of A and the first row of B.
    pub outlier: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDef {
    pub tokens: usize,
    pub input: usize,
    pub cond: usize,
    pub latent: usize,
    pub steps: usize,
    pub seed: u64,
    pub noise: f32,
    pub encoder: Vec<LayerDef>,
    pub backbone: Vec<LayerDef>,
    pub decoder: Vec<LayerDef>,
    pub adapters: Vec<AdapterDef>,
}

/// The default two-layer toy model used throughout the tests.
pub const TOY: &str = "\
tokens 4
input 8
cond 4
latent 8
steps 2
seed 7
noise 1.0
encoder linear 16 silu
encoder linear 8
backbone lora 16 rank=4 silu
backbone lora 8 rank=4 residual
decoder linear 16 silu
decoder linear 8
adapter style-a seed=11 scale=0.2
adapter style-b seed=12 scale=0.2
";

impl ModelDef {
    pub fn parse(text: &str) -> Result<Self> {
        let mut d = ModelDef {
            tokens: 0,
            input: 0,
            cond: 0,
            latent: 0,
            steps: 1,
            seed: 0,
            noise: 1.0,
            encoder: vec![],
            backbone: vec![],
            decoder: vec![],
            adapters: vec![],
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let words: Vec<&str> = line.split_whitespace().collect();
            let num = |w: Option<&&str>| -> Result<usize> {
                w.and_then(|s| s.parse().ok()).ok_or_else(|| err(format!("expected a number in {line:?}")))
            };
            match words[0] {
                "tokens" => d.tokens = num(words.get(1))?,
                "input" => d.input = num(words.get(1))?,
                "cond" => d.cond = num(words.get(1))?,
                "latent" => d.latent = num(words.get(1))?,
                "steps" => d.steps = num(words.get(1))?,
                "seed" => d.seed = num(words.get(1))? as u64,
                "noise" => {
                    d.noise = words.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| err("bad noise".into()))?
                }
                role @ ("encoder" | "backbone" | "decoder") => {
                    let layer = parse_layer(&words[1..]).map_err(err)?;
                    if layer.lora_rank.is_some() && role != "backbone" {
                        return Err(err("lora layers are only allowed in the backbone".into()));
                    }
                    match role {
                        "encoder" => d.encoder.push(layer),
                        "backbone" => d.backbone.push(layer),
                        _ => d.decoder.push(layer),
                    }
                }
                "adapter" => d.adapters.push(parse_adapter(&words[1..]).map_err(err)?),
                other => return Err(err(format!("unknown keyword {other:?}"))),
            }
        }
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        for (what, v) in [("tokens", self.tokens), ("input", self.input), ("cond", self.cond), ("latent", self.latent)] {
            if v == 0 {
                return Err(Error::Param(format!("{what} must be positive")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Param("steps must be positive".into()));
        }
        for (what, layers) in [("encoder", &self.encoder), ("backbone", &self.backbone)] {
            match layers.last() {
                Some(l) if l.out == self.latent => {}
                _ => return Err(Error::Param(format!("{what} must end with a layer of width latent={}", self.latent))),
            }
        }
        if self.decoder.is_empty() {
            return Err(Error::Param("decoder needs at least one layer".into()));
        }
        if let Some(l) = self.backbone.iter().find(|l| l.residual && l.out != self.latent) {
            return Err(Error::Param(format!("residual layer width {} != latent {}", l.out, self.latent)));
        }
        let mut ids: Vec<&str> = self.adapters.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Param("duplicate adapter id".into()));
        }
        Ok(())
    }

    pub fn build_bundle(&self) -> Result<ModelBundle> {
        let mut layer_idx = 0u64;
        let mut weight = |rows: usize, cols: usize| {
            layer_idx += 1;
            Prng::derive(self.seed, layer_idx).normal_tensor(&[rows, cols], 1.0 / (cols as f32).sqrt())
        };

        let mut e = GraphBuilder::new("encoder", ENCODER_BASE);
        let mut h = e.input("x", &[self.input, self.tokens]);
        let mut width = self.input;
        for l in &self.encoder {
            let w = e.constant(weight(l.out, width));
            h = e.matmul(w, h);
            if let Some(a) = l.act {
                h = e.act(h, a);
            }
            width = l.out;
        }
        e.output("z", h);

        let mut u = GraphBuilder::new("backbone", BACKBONE_BASE);
        let z = u.input("z", &[self.latent, self.tokens]);
        let c = u.input("cond", &[self.cond, self.tokens]);
        let mut h = u.concat(&[z, c]);
        let mut width = self.latent + self.cond;
        for l in &self.backbone {
            let w = u.constant(weight(l.out, width));
            h = match l.lora_rank {
                Some(r) => u.lora_matmul(w, h, r),
                None => u.matmul(w, h),
            };
            if let Some(a) = l.act {
                h = u.act(h, a);
            }
            if l.residual {
                h = u.add(h, z);
            }
            width = l.out;
        }
        u.output("z_next", h);

        let mut dgr = GraphBuilder::new("decoder", DECODER_BASE);
        let mut h = dgr.input("z", &[self.latent, self.tokens]);
        let mut width = self.latent;
        for l in &self.decoder {
            let w = dgr.constant(weight(l.out, width));
            h = dgr.matmul(w, h);
            if let Some(a) = l.act {
                h = dgr.act(h, a);
            }
            width = l.out;
        }
        dgr.output("y", h);

        let bundle = ModelBundle {
            encoder: e.finish()?,
            backbone: u.finish()?,
            decoder: dgr.finish()?,
            steps: self.steps,
            noise_std: self.noise,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn build_adapter(&self, def: &AdapterDef, bundle: &ModelBundle) -> Result<LoRAAdapter> {
        let mut entries = BTreeMap::new();
        for (n, attrs) in bundle.backbone.lora_nodes() {
            let w = weight_shape(bundle, n.inputs[0])?;
            let r = def.rank.unwrap_or(attrs.rank).min(attrs.rank);
            let mut rng = Prng::derive(def.seed, n.id as u64);
            let mut a = rng.normal_tensor(&[w.0, r], def.scale);
            let mut b = rng.normal_tensor(&[r, w.1], def.scale);
            if let Some(k) = def.outlier {
                for v in a.as_f32_mut()?.iter_mut().take(r) {
                    *v *= k;
                }
                for v in b.as_f32_mut()?.iter_mut().take(w.1) {
                    *v *= k;
                }
            }
            entries.insert(n.id, LoraFactors { a, b, alpha: def.alpha });
        }
        let adapter = LoRAAdapter { id: def.id.clone(), entries };
        adapter.validate(&bundle.backbone)?;
        Ok(adapter)
    }

    pub fn build_adapters(&self, bundle: &ModelBundle) -> Result<Vec<LoRAAdapter>> {
        self.adapters.iter().map(|d| self.build_adapter(d, bundle)).collect()
    }

    /// Seeded inputs; sample `i` uses noise seed `seed + i`.
    pub fn samples(&self, n: usize, seed: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = Prng::derive(seed, i as u64);
                let x = rng.normal_tensor(&[self.input, self.tokens], 1.0);
                let cond = rng.normal_tensor(&[self.cond, self.tokens], 1.0);
                Sample::new(x, cond, seed.wrapping_add(i as u64))
            })
            .collect()
    }
}

fn weight_shape(bundle: &ModelBundle, t: TensorId) -> Result<(usize, usize)> {
    let g = &bundle.backbone;
    match g.nodes.iter().find(|n| n.output == t).map(|n| &n.op) {
        Some(Op::Constant) => g.constants[&t].dims2(),
        _ => Err(Error::Adapter(format!("weight t{t} is not a constant"))),
    }
}

fn parse_layer(words: &[&str]) -> std::result::Result<LayerDef, String> {
    let (kind, rest) = words.split_first().ok_or("missing layer kind")?;
    let (out, flags) = rest.split_first().ok_or("missing layer width")?;
    let out: usize = out.parse().map_err(|_| format!("bad width {out:?}"))?;
    if out == 0 {
        return Err("layer width must be positive".into());
    }
    let mut layer = LayerDef { out, act: None, lora_rank: None, residual: false };
    for f in flags {
        if let Some(r) = f.strip_prefix("rank=") {
            layer.lora_rank = Some(r.parse().map_err(|_| format!("bad rank {r:?}"))?);
        } else if *f == "residual" {
            layer.residual = true;
        } else if let Some(a) = ActKind::parse(f) {
            layer.act = Some(a);
        } else {
            return Err(format!("unknown layer flag {f:?}"));
        }
    }
    match *kind {
        "linear" if layer.lora_rank.is_some() => Err("linear layers take no rank".into()),
        "linear" => Ok(layer),
        "lora" if layer.lora_rank.is_none() => Err("lora layers need rank=<r>".into()),
        "lora" => Ok(layer),
        k => Err(format!("unknown layer kind {k:?}")),
    }
}

fn parse_adapter(words: &[&str]) -> std::result::Result<AdapterDef, String> {
    let (id, kvs) = words.split_first().ok_or("missing adapter id")?;
    let mut a = AdapterDef { id: id.to_string(), seed: 0, scale: 0.1, rank: None, alpha: 1.0, outlier: None };
    for kv in kvs {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
        let bad = || format!("bad value for {k}: {v:?}");
        match k {
            "seed" => a.seed = v.parse().map_err(|_| bad())?,
            "scale" => a.scale = v.parse().map_err(|_| bad())?,
            "rank" => a.rank = Some(v.parse().map_err(|_| bad())?),
            "alpha" => a.alpha = v.parse().map_err(|_| bad())?,
            "outlier" => a.outlier = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(format!("unknown adapter key {k:?}")),
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::execute_fp;

    #[test]
    fn toy_builds_and_runs() {
        let d = ModelDef::parse(TOY).unwrap();
        let b = d.build_bundle().unwrap();
        assert_eq!(b.backbone.lora_nodes().count(), 2);
        let adapters = d.build_adapters(&b).unwrap();
        assert_eq!(adapters.len(), 2);
        let s = &d.samples(1, 3)[0];
        let y = execute_fp(&b, Some(&adapters[0]), s).unwrap();
        assert_eq!(y.shape(), &[8, 4]);
        assert!(y.as_f32().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parse_errors_point_at_line() {
        let bad = "tokens 4\ninput 8\nbackbone conv 3\n";
        assert!(matches!(ModelDef::parse(bad), Err(Error::Parse { line: 3, .. })));
        assert!(ModelDef::parse("tokens 4\n").is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let d = ModelDef::parse(TOY).unwrap();
        assert_eq!(d.build_bundle().unwrap(), d.build_bundle().unwrap());
    }
}
