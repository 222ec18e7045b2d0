use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::Session;
use crate::error::{Error, Result};
use crate::graph::Sample;

/// ROM needed for `n` use-cases when each ships its own merged model
/// versus one shared base plus per-adapter packs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RomAccounting {
    pub n_usecases: usize,
    pub separate_total: f64,
    pub shared_total: f64,
    pub memory_ratio: f64,
}

/// `separate = n·base + Σ lora`, `shared = base + Σ lora`. Units are the
/// caller's.
pub fn rom_accounting(base: f64, loras: &[f64]) -> Result<RomAccounting> {
    if loras.is_empty() {
        return Err(Error::Empty("adapter list"));
    }
    let n = loras.len();
    let sum: f64 = loras.iter().sum();
    let separate_total = n as f64 * base + sum;
    let shared_total = base + sum;
    Ok(RomAccounting { n_usecases: n, separate_total, shared_total, memory_ratio: separate_total / shared_total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KPIReport {
    pub init_ms: f64,
    pub bind_ms: f64,
    pub execute_ms: f64,
    pub end_to_end_ms: f64,
    pub shared_rom_bytes: usize,
    pub lora_rom_bytes: usize,
    /// Activation arena plus the largest adapter's slot buffers.
    pub peak_ram_bytes: usize,
    pub arena_bytes: usize,
    pub slot_bytes: usize,
    pub n_usecases: usize,
    pub separate_total_bytes: usize,
    pub shared_total_bytes: usize,
    pub memory_ratio: f64,
}

impl KPIReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("arena_bytes", self.arena_bytes.to_string()),
            ("bind_ms", format!("{:.4}", self.bind_ms)),
            ("end_to_end_ms", format!("{:.4}", self.end_to_end_ms)),
            ("execute_ms", format!("{:.4}", self.execute_ms)),
            ("init_ms", format!("{:.4}", self.init_ms)),
            ("lora_rom_bytes", self.lora_rom_bytes.to_string()),
            ("memory_ratio", format!("{:.6}", self.memory_ratio)),
            ("n_usecases", self.n_usecases.to_string()),
            ("peak_ram_bytes", self.peak_ram_bytes.to_string()),
            ("separate_total_bytes", self.separate_total_bytes.to_string()),
            ("shared_rom_bytes", self.shared_rom_bytes.to_string()),
            ("shared_total_bytes", self.shared_total_bytes.to_string()),
            ("slot_bytes", self.slot_bytes.to_string()),
        ];
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// `key value` lines sorted by key.
    pub fn to_text(&self) -> String {
        self.fields().into_iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} {v}");
            s
        })
    }

    /// A header row and one value row, columns sorted by key.
    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let keys: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let vals: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Binds every pack in turn and runs the whole workload under it. Times
/// are means per bind and per inference.
pub fn kpi(s: &mut Session, packs: &[Vec<u8>], workload: &[Sample]) -> Result<KPIReport> {
    if packs.is_empty() {
        return Err(Error::Empty("pack list"));
    }
    let (mut bind, mut exec, mut runs) = (Duration::ZERO, Duration::ZERO, 0u32);
    let mut slot_bytes = 0;
    for p in packs {
        let t0 = Instant::now();
        s.bind_lora(p)?;
        bind += t0.elapsed();
        slot_bytes = slot_bytes.max(s.slot_bytes());
        for sample in workload {
            let t0 = Instant::now();
            s.infer_sample(sample)?;
            exec += t0.elapsed();
            runs += 1;
        }
    }
    let init_ms = ms(s.timers.init);
    let bind_ms = ms(bind) / packs.len() as f64;
    let execute_ms = if runs > 0 { ms(exec) / runs as f64 } else { 0.0 };
    let base = s.model_bytes().len();
    let lora: Vec<usize> = packs.iter().map(Vec::len).collect();
    let lora_rom_bytes: usize = lora.iter().sum();
    let n = packs.len();
    let separate_total_bytes = n * base + lora_rom_bytes;
    let shared_total_bytes = base + lora_rom_bytes;
    Ok(KPIReport {
        init_ms,
        bind_ms,
        execute_ms,
        end_to_end_ms: init_ms + bind_ms + execute_ms,
        shared_rom_bytes: base,
        lora_rom_bytes,
        peak_ram_bytes: s.arena_bytes() + slot_bytes,
        arena_bytes: s.arena_bytes(),
        slot_bytes,
        n_usecases: n,
        separate_total_bytes,
        shared_total_bytes,
        memory_ratio: separate_total_bytes as f64 / shared_total_bytes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapReport {
    pub reps: usize,
    /// Median time to bind a pack into a live session.
    pub swap_ms: f64,
    /// Median time to load the model from bytes and bind a pack.
    pub reload_ms: f64,
}

impl SwapReport {
    pub fn swap_is_faster(&self) -> bool {
        self.swap_ms < self.reload_ms
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Alternates binds of `a` and `b` on `s`, and separately times a fresh
/// load of the session's model followed by a bind.
pub fn swap_benchmark(s: &mut Session, a: &[u8], b: &[u8], reps: usize) -> Result<SwapReport> {
    if reps < 3 {
        return Err(Error::Param(format!("reps must be at least 3, got {reps}")));
    }
    let bytes = s.model_bytes().clone();
    let mut swap = Vec::with_capacity(reps);
    let mut reload = Vec::with_capacity(reps);
    for i in 0..reps {
        let pack = if i % 2 == 0 { a } else { b };
        let t0 = Instant::now();
        s.bind_lora(pack)?;
        swap.push(ms(t0.elapsed()));

        let t0 = Instant::now();
        let mut fresh = Session::load_shared(bytes.clone())?;
        fresh.bind_lora(pack)?;
        reload.push(ms(t0.elapsed()));
        drop(fresh);
    }
    Ok(SwapReport { reps, swap_ms: median(swap), reload_ms: median(reload) })
}
