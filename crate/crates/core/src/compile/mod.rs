//! LoRA-as-input rewriting, graph optimization and the binary deployment
//! formats.
//!
//! [`compile_bundle`] turns a bundle plus its shared profile into a
//! [`CompiledModel`]: the backbone's adapter nodes become dataflow fed by
//! slot inputs, every graph is materialized, folded and pruned, and the
//! result can be frozen to `.quadm` bytes. Adapters are packed separately
//! into `.qlp` archives that bind to the slots at run time.

mod format;
mod pack;
mod passes;
mod rewrite;

pub use format::{inspect, CompiledMeta, FORMAT_VERSION, MODEL_MAGIC};
pub use pack::{pack_lora, LoraPack, PackedSlot, PACK_MAGIC, PACK_VERSION};
pub use passes::{arith_op_count, constant_fold, dead_code_eliminate, scale_fold};
pub use rewrite::{rewrite_lora_as_input, LoRASlotDescriptor};

use crate::error::Result;
use crate::graph::{Graph, ModelBundle};
use crate::quant::{materialize, QuantProfile};

/// A frozen, optimized bundle with adapter slots on the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledModel {
    pub version: u16,
    pub encoder: Graph,
    pub backbone: Graph,
    pub decoder: Graph,
    pub steps: usize,
    pub noise_std: f32,
    pub profile: QuantProfile,
    pub slots: Vec<LoRASlotDescriptor>,
    pub meta: CompiledMeta,
}

impl CompiledModel {
    pub fn graphs(&self) -> [&Graph; 3] {
        [&self.encoder, &self.backbone, &self.decoder]
    }

    /// Total bytes of stored constants across the three graphs.
    pub fn weight_bytes(&self) -> usize {
        self.graphs().iter().flat_map(|g| g.constants.values()).map(|t| t.byte_len()).sum()
    }
}

/// Runs a graph through the optimization passes in their fixed order.
pub fn optimize(g: &Graph) -> Result<Graph> {
    let g = constant_fold(g)?;
    let g = dead_code_eliminate(&g)?;
    let mut g = scale_fold(&g)?;
    g.sort_nodes()?;
    Ok(g)
}

/// Rewrites adapter nodes into slot inputs, materializes `shared` and
/// optimizes all three graphs.
pub fn compile_bundle(bundle: &ModelBundle, shared: &QuantProfile, seed: u64) -> Result<CompiledModel> {
    bundle.validate()?;
    shared.check_coverage(bundle)?;
    let (backbone, slots) = rewrite_lora_as_input(&bundle.backbone, shared)?;
    let mut floor = bundle.max_tensor_id().max(backbone.max_tensor_id().unwrap_or(0)) + 1;
    let mut next = |g: &Graph| -> Result<Graph> {
        let m = materialize(g, shared, floor)?;
        floor = m.max_tensor_id().map_or(floor, |t| t + 1).max(floor);
        optimize(&m)
    };
    let encoder = next(&bundle.encoder)?;
    let backbone = next(&backbone)?;
    let decoder = next(&bundle.decoder)?;
    Ok(CompiledModel {
        version: FORMAT_VERSION,
        encoder,
        backbone,
        decoder,
        steps: bundle.steps,
        noise_std: bundle.noise_std,
        profile: shared.clone(),
        slots,
        meta: CompiledMeta { seed, policy: shared.policy.name(), lora_bits: shared.lora_bits },
    })
}
