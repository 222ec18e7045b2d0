use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use quad_core::compile::{compile_bundle, inspect, pack_lora, CompiledModel};
use quad_core::distill::{quad_align_all, DistillConfig};
use quad_core::graph::{LoRAAdapter, ModelBundle, Sample};
use quad_core::model_def::ModelDef;
use quad_core::par::Exec;
use quad_core::quant::{calibrate, Policy, QuantProfile};
use quad_core::runtime::{kpi, swap_benchmark, Session};
use quad_core::sensitivity::{qss, select_anchor, unified_profile, Anchor, QSSReport, DEFAULT_TIE_EPSILON};
use quad_core::store;

use crate::config::ConfigFile;
use crate::{Cli, Cmd, DistillOpts, Inputs};

pub enum Failure {
    Usage(anyhow::Error),
    Stage(&'static str, anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Stage(..) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "{e:#}"),
            Failure::Stage(s, e) => write!(f, "stage {s} failed: {e:#}"),
        }
    }
}

type Out<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Out<T>;
    fn stage(self, name: &'static str) -> Out<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Out<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn stage(self, name: &'static str) -> Out<T> {
        self.map_err(|e| Failure::Stage(name, e.into()))
    }
}

fn usage<T>(msg: String) -> Out<T> {
    Err(Failure::Usage(anyhow!(msg)))
}

/// Global settings after merging flags, config file and defaults.
struct Ctx {
    cfg: ConfigFile,
    seed: u64,
    policy: Policy,
    lora_bits: u8,
    tie_eps: f64,
    exec: Exec,
}

impl Ctx {
    fn required(&self, flag: &Option<PathBuf>, key: &str) -> Out<PathBuf> {
        match self.cfg.pick_path(flag, key) {
            Some(p) => Ok(p),
            None => usage(format!("--{key} is required (flag or config key {key})")),
        }
    }

    fn distill_config(&self, o: &DistillOpts) -> Out<DistillConfig> {
        let d = DistillConfig::default();
        let c = &self.cfg;
        Ok(DistillConfig {
            steps: c.pick(o.steps, "steps", d.steps).usage()?,
            learning_rate: c.pick(o.lr, "lr", d.learning_rate).usage()?,
            lambda_task: c.pick(o.lambda, "lambda", 0.0).usage()?,
            batch: c.pick(o.batch, "batch", d.batch).usage()?,
            seed: self.seed,
        })
    }
}

fn context(cli: &Cli) -> Out<Ctx> {
    let g = &cli.global;
    let cfg = match &g.config {
        Some(p) => ConfigFile::load(p).usage()?,
        None => ConfigFile::default(),
    };
    let seed = cfg.pick(g.seed, "seed", 0u64).usage()?;
    let policy_text: String = cfg.pick(g.policy.clone(), "policy", "w8a16".to_string()).usage()?;
    let policy = Policy::parse(&policy_text).usage()?;
    let lora_bits: u8 = cfg.pick(g.lora_bits.as_deref().map(|s| s.parse().expect("restricted")), "lora_bits", 8u8).usage()?;
    if lora_bits != 8 && lora_bits != 16 {
        return usage(format!("lora_bits must be 8 or 16, got {lora_bits}"));
    }
    let tie_eps = cfg.pick(g.tie_eps, "tie_eps", DEFAULT_TIE_EPSILON).usage()?;
    if !(0.0..1.0).contains(&tie_eps) {
        return usage(format!("tie epsilon {tie_eps} outside [0, 1)"));
    }
    Ok(Ctx { cfg, seed, policy, lora_bits, tie_eps, exec: Exec::default() })
}

fn read(path: &Path) -> Out<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display())).usage()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Out<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).stage("write")?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).stage("write")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_def(path: &Path) -> Out<(ModelDef, ModelBundle)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).usage()?;
    let def = ModelDef::parse(&text).with_context(|| format!("parsing {}", path.display())).usage()?;
    let bundle = def.build_bundle().with_context(|| format!("building {}", path.display())).usage()?;
    Ok((def, bundle))
}

fn load_data(dir: &Path) -> Out<Vec<Sample>> {
    if !dir.is_dir() {
        return usage(format!("data directory {} does not exist", dir.display()));
    }
    let data = store::load_samples(dir).with_context(|| format!("loading samples from {}", dir.display())).usage()?;
    if data.is_empty() {
        return usage(format!("data directory {} holds no .{} files", dir.display(), store::SAMPLE_EXT));
    }
    Ok(data)
}

fn load_adapters(dir: Option<&Path>, def: &ModelDef, bundle: &ModelBundle) -> Out<Vec<LoRAAdapter>> {
    let adapters = match dir {
        Some(d) => store::load_adapters(d).with_context(|| format!("loading adapters from {}", d.display())).usage()?,
        None => def.build_adapters(bundle).context("building declared adapters").usage()?,
    };
    if adapters.is_empty() {
        return usage("no adapters: pass --adapters or declare them in the definition".into());
    }
    for a in &adapters {
        a.validate(&bundle.backbone).with_context(|| format!("adapter {}", a.id)).usage()?;
    }
    Ok(adapters)
}

struct Loaded {
    bundle: ModelBundle,
    data: Vec<Sample>,
    adapters: Vec<LoRAAdapter>,
}

fn load_inputs(ctx: &Ctx, inputs: &Inputs) -> Out<Loaded> {
    let (def, bundle) = load_def(&ctx.required(&inputs.def, "def")?)?;
    let data = load_data(&ctx.required(&inputs.data, "data")?)?;
    let adapter_dir = ctx.cfg.pick_path(&inputs.adapters, "adapters");
    let adapters = load_adapters(adapter_dir.as_deref(), &def, &bundle)?;
    Ok(Loaded { bundle, data, adapters })
}

fn read_profile(path: &Path) -> Out<QuantProfile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading profile {}", path.display())).usage()?;
    QuantProfile::from_text(&text).with_context(|| format!("parsing profile {}", path.display())).usage()
}

fn profile_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.profile"))
}

pub fn dispatch(cli: Cli) -> Out<()> {
    let ctx = context(&cli)?;
    match &cli.cmd {
        Cmd::Init { def, out, count } => cmd_init(&ctx, def, out, *count),
        Cmd::Calibrate { inputs, out } => {
            let l = load_inputs(&ctx, inputs)?;
            cmd_calibrate(&ctx, &l, &ctx.required(out, "out")?)
        }
        Cmd::Qss { inputs, profiles, out, shared } => {
            let l = load_inputs(&ctx, inputs)?;
            let shared = shared.clone().unwrap_or_else(|| sibling(out, "shared.profile"));
            cmd_qss(&ctx, &l, profiles, out, &shared).map(|_| ())
        }
        Cmd::Distill { inputs, profile, report, out, opts } => {
            let l = load_inputs(&ctx, inputs)?;
            let shared = read_profile(profile)?;
            let skip = match report {
                Some(p) => report_anchor(p)?,
                None => None,
            };
            cmd_distill(&ctx, &l, &shared, skip.as_deref(), opts, &ctx.required(out, "out")?).map(|_| ())
        }
        Cmd::Compile { def, profile, out } => {
            let (_, bundle) = load_def(&ctx.required(def, "def")?)?;
            cmd_compile(&ctx, &bundle, &read_profile(profile)?, out)
        }
        Cmd::PackLora { model, adapters, adapter, out } => {
            let mut list = Vec::new();
            if let Some(d) = ctx.cfg.pick_path(adapters, "adapters") {
                list.extend(store::list(&d, store::ADAPTER_EXT).with_context(|| format!("listing {}", d.display())).usage()?);
            }
            list.extend(adapter.iter().cloned());
            if list.is_empty() {
                return usage("pack-lora needs --adapters or --adapter".into());
            }
            let adapters = list
                .iter()
                .map(|p| store::adapter_from_bytes(&read(p)?).with_context(|| format!("loading {}", p.display())).usage())
                .collect::<Out<Vec<_>>>()?;
            cmd_pack(model, &adapters, out).map(|_| ())
        }
        Cmd::Run { model, pack, data, out } => {
            let data_dir = ctx.required(data, "data")?;
            load_data(&data_dir)?;
            cmd_run(model, pack, &data_dir, out)
        }
        Cmd::Bench { model, packs, reps, workload_dir, out, csv } => {
            let reps = ctx.cfg.pick(*reps, "reps", 11usize).usage()?;
            let workload = match ctx.cfg.pick_path(workload_dir, "data") {
                Some(d) => load_data(&d)?,
                None => Vec::new(),
            };
            cmd_bench(model, packs, reps, &workload, out.as_deref(), csv.as_deref())
        }
        Cmd::Inspect { file } => {
            let bytes = read(file)?;
            print!("{}", inspect(&bytes).with_context(|| format!("inspecting {}", file.display())).usage()?);
            Ok(())
        }
        Cmd::Pipeline { inputs, out, opts, reps } => {
            let l = load_inputs(&ctx, inputs)?;
            let out = ctx.required(out, "out")?;
            let reps = ctx.cfg.pick(*reps, "reps", 5usize).usage()?;
            cmd_pipeline(&ctx, &l, opts, reps, &out)
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn report_anchor(path: &Path) -> Out<Option<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading report {}", path.display())).usage()?;
    let anchor = text
        .lines()
        .find_map(|l| l.strip_prefix("anchor "))
        .ok_or_else(|| Failure::Usage(anyhow!("report {} has no anchor line", path.display())))?;
    Ok((anchor != Anchor::Unified.to_string()).then(|| anchor.to_string()))
}

fn cmd_init(ctx: &Ctx, def: &Option<PathBuf>, out: &Option<PathBuf>, count: usize) -> Out<()> {
    let (def, bundle) = load_def(&ctx.required(def, "def")?)?;
    let out = ctx.required(out, "out")?;
    if count == 0 {
        return usage("--count must be positive".into());
    }
    let paths = store::save_samples(&out.join("data"), &def.samples(count, ctx.seed)).stage("init")?;
    println!("wrote {} samples to {}", paths.len(), out.join("data").display());
    for a in def.build_adapters(&bundle).stage("init")? {
        write(&out.join("adapters").join(format!("{}.{}", a.id, store::ADAPTER_EXT)), store::adapter_to_bytes(&a).stage("init")?)?;
    }
    Ok(())
}

fn cmd_calibrate(ctx: &Ctx, l: &Loaded, out: &Path) -> Out<()> {
    for a in &l.adapters {
        let p = calibrate(&l.bundle, Some(a), &l.data, ctx.exec)
            .and_then(|s| s.to_profile(ctx.policy, ctx.lora_bits))
            .stage("calibrate")?;
        write(&profile_path(out, &a.id), p.to_text())?;
    }
    let u = unified_profile(&l.bundle, &l.adapters, &l.data, ctx.policy, ctx.lora_bits, ctx.exec).stage("calibrate")?;
    write(&profile_path(out, "unified"), u.to_text())
}

fn cmd_qss(ctx: &Ctx, l: &Loaded, profiles: &Path, out: &Path, shared_out: &Path) -> Out<(QuantProfile, QSSReport)> {
    let mut scores = std::collections::BTreeMap::new();
    let mut own = Vec::new();
    for a in &l.adapters {
        let p = read_profile(&profile_path(profiles, &a.id))?;
        let q = qss(&l.bundle, a, &p, &l.data, ctx.exec).stage("qss")?;
        scores.insert(a.id.clone(), q);
        own.push(p);
    }
    let (anchor, rule) = select_anchor(&scores, ctx.tie_eps).stage("qss")?;
    let shared = match &anchor {
        Anchor::Adapter(id) => own[l.adapters.iter().position(|a| &a.id == id).expect("scored")].clone(),
        Anchor::Unified => read_profile(&profile_path(profiles, "unified"))?,
    };
    shared.check_coverage(&l.bundle).stage("qss")?;
    let report = QSSReport { scores, anchor, rule, tie_epsilon: ctx.tie_eps };
    write(out, report.to_text())?;
    write(shared_out, shared.to_text())?;
    Ok((shared, report))
}

fn cmd_distill(
    ctx: &Ctx,
    l: &Loaded,
    shared: &QuantProfile,
    skip: Option<&str>,
    opts: &DistillOpts,
    out: &Path,
) -> Out<Vec<LoRAAdapter>> {
    let cfg = ctx.distill_config(opts)?;
    cfg.validate().usage()?;
    let datasets = vec![l.data.clone(); l.adapters.len()];
    let results = quad_align_all(&l.bundle, &l.adapters, shared, &datasets, &cfg, skip, ctx.exec).stage("distill")?;
    let mut adapters = Vec::with_capacity(results.len());
    for (a, trace) in results {
        write(&out.join(format!("{}.{}", a.id, store::ADAPTER_EXT)), store::adapter_to_bytes(&a).stage("distill")?)?;
        match trace {
            Some(t) => {
                // Means over the first and last pass through the data.
                let epoch = l.data.len().div_ceil(cfg.batch).clamp(1, t.rows.len());
                let mean = |rows: &[quad_core::distill::TraceRow]| rows.iter().map(|r| r.recon).sum::<f64>() / rows.len() as f64;
                let (first, last) = (mean(&t.rows[..epoch]), mean(&t.rows[t.rows.len() - epoch..]));
                println!("{}: mean recon {first:.4e} -> {last:.4e}", a.id);
                write(&out.join(format!("{}.trace.csv", a.id)), t.to_csv())?;
            }
            None => println!("{}: anchor, kept as is", a.id),
        }
        adapters.push(a);
    }
    Ok(adapters)
}

fn cmd_compile(ctx: &Ctx, bundle: &ModelBundle, shared: &QuantProfile, out: &Path) -> Out<()> {
    let bytes = compile_bundle(bundle, shared, ctx.seed).and_then(|m| m.freeze()).stage("compile")?;
    write(out, bytes)
}

fn cmd_pack(model: &Path, adapters: &[LoRAAdapter], out: &Path) -> Out<Vec<PathBuf>> {
    let m = CompiledModel::load(&read(model)?).with_context(|| format!("loading {}", model.display())).usage()?;
    let mut paths = Vec::new();
    for a in adapters {
        let bytes = pack_lora(a, &m.slots, &m.profile).with_context(|| format!("adapter {}", a.id)).stage("pack")?;
        let p = out.join(format!("{}.qlp", a.id));
        write(&p, bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

fn cmd_run(model: &Path, pack: &Path, data: &Path, out: &Path) -> Out<()> {
    let mut s = Session::load(&read(model)?).with_context(|| format!("loading {}", model.display())).usage()?;
    s.bind_lora(&read(pack)?).with_context(|| format!("binding {}", pack.display())).stage("run")?;
    let files = store::list(data, store::SAMPLE_EXT).usage()?;
    for f in files {
        let sample = store::sample_from_bytes(&read(&f)?).usage()?;
        let y = s.infer_sample(&sample).stage("run")?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
        write(&out.join(format!("{stem}.{}", store::TENSOR_EXT)), store::tensor_to_bytes(&y).stage("run")?)?;
    }
    Ok(())
}

fn cmd_bench(model: &Path, packs: &[PathBuf], reps: usize, workload: &[Sample], out: Option<&Path>, csv: Option<&Path>) -> Out<()> {
    if reps < 3 {
        return usage(format!("--reps must be at least 3, got {reps}"));
    }
    let mut s = Session::load(&read(model)?).with_context(|| format!("loading {}", model.display())).usage()?;
    let packs: Vec<Vec<u8>> = packs.iter().map(|p| read(p)).collect::<Out<_>>()?;
    let report = kpi(&mut s, &packs, workload).stage("bench")?;
    let b = packs.get(1).unwrap_or(&packs[0]);
    let swap = swap_benchmark(&mut s, &packs[0], b, reps).stage("bench")?;
    let mut text = report.to_text();
    text += &format!("swap_ms {:.4}\nreload_ms {:.4}\nswap_reps {}\n", swap.swap_ms, swap.reload_ms, swap.reps);
    print!("{text}");
    if let Some(p) = out {
        write(p, &text)?;
    }
    if let Some(p) = csv {
        write(p, report.to_csv())?;
    }
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx, l: &Loaded, opts: &DistillOpts, reps: usize, out: &Path) -> Out<()> {
    let profiles = out.join("profiles");
    cmd_calibrate(ctx, l, &profiles)?;
    let (shared, report) = cmd_qss(ctx, l, &profiles, &out.join("qss.txt"), &out.join("shared.profile"))?;
    println!("anchor {} ({})", report.anchor, report.rule.name());
    let skip = match &report.anchor {
        Anchor::Adapter(id) => Some(id.as_str()),
        Anchor::Unified => None,
    };
    let aligned = cmd_distill(ctx, l, &shared, skip, opts, &out.join("adapters"))?;
    let model = out.join("model.quadm");
    cmd_compile(ctx, &l.bundle, &shared, &model)?;
    let packs = cmd_pack(&model, &aligned, &out.join("packs"))?;

    let mut s = Session::load(&read(&model)?).stage("run")?;
    for (a, p) in aligned.iter().zip(&packs) {
        s.bind_lora(&read(p)?).stage("run")?;
        for (i, sample) in l.data.iter().enumerate() {
            let y = s.infer_sample(sample).stage("run")?;
            let path = out.join("outputs").join(&a.id).join(format!("sample-{i:04}.{}", store::TENSOR_EXT));
            fs::create_dir_all(path.parent().expect("nested")).stage("run")?;
            fs::write(&path, store::tensor_to_bytes(&y).stage("run")?).stage("run")?;
        }
    }
    println!("ran {} samples under {} adapters", l.data.len(), aligned.len());
    cmd_bench(&model, &packs, reps, &l.data, Some(&out.join("kpi.txt")), Some(&out.join("kpi.csv")))
        .map_err(|e| match e {
            Failure::Usage(e) => Failure::Stage("bench", e),
            f => f,
        })
}
