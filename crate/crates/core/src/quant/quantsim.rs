use super::{materialize, QuantProfile};
use crate::error::Result;
use crate::graph::{run_outputs, run_pipeline, ExecCtx, Graph, LoRAAdapter, ModelBundle, Mode, Sample, Value};
use crate::tensor::Tensor;

/// A bundle with its profile materialized, ready for repeated simulation.
#[derive(Debug, Clone)]
pub struct QuantSim {
    pub encoder: Graph,
    pub backbone: Graph,
    pub decoder: Graph,
    pub steps: usize,
    pub noise_std: f32,
}

impl QuantSim {
    pub fn new(bundle: &ModelBundle, profile: &QuantProfile) -> Result<Self> {
        bundle.validate()?;
        profile.check_coverage(bundle)?;
        let mut floor = bundle.max_tensor_id() + 1;
        let mut next = |g: &Graph| -> Result<Graph> {
            let m = materialize(g, profile, floor)?;
            floor = m.max_tensor_id().map_or(floor, |t| t + 1).max(floor);
            Ok(m)
        };
        Ok(QuantSim {
            encoder: next(&bundle.encoder)?,
            backbone: next(&bundle.backbone)?,
            decoder: next(&bundle.decoder)?,
            steps: bundle.steps,
            noise_std: bundle.noise_std,
        })
    }

    pub fn graphs(&self) -> [&Graph; 3] {
        [&self.encoder, &self.backbone, &self.decoder]
    }

    pub fn run(&self, adapter: Option<&LoRAAdapter>, sample: &Sample) -> Result<Tensor> {
        self.run_mode(adapter, sample, Mode::Exact)
    }

    pub fn run_mode(&self, adapter: Option<&LoRAAdapter>, sample: &Sample, mode: Mode) -> Result<Tensor> {
        if let Some(a) = adapter {
            a.validate(&self.backbone)?;
        }
        let ctx = ExecCtx { lora: adapter.map(|a| &a.entries), mode };
        run_pipeline(self.graphs(), self.steps, self.noise_std, sample, |_, g, feeds| {
            let feeds: Vec<Value> = feeds.iter().cloned().map(Value::plain).collect();
            Ok(run_outputs(g, &feeds, &ctx)?.remove(0))
        })
    }
}

/// Integer-faithful simulation of the quantized pipeline.
pub fn execute_quantsim(
    bundle: &ModelBundle,
    profile: &QuantProfile,
    adapter: Option<&LoRAAdapter>,
    sample: &Sample,
) -> Result<Tensor> {
    QuantSim::new(bundle, profile)?.run(adapter, sample)
}
