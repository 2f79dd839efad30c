//! Inference throughput harness: warmup, timed iterations, repeats, and the
//! coefficient of variation across repeats. The clock is injectable so the
//! FPS arithmetic is testable without real hardware timing.

use anyhow::{bail, Result};

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

/// Wall clock backed by a monotonic timer.
pub struct MonotonicClock {
    start: std::time::Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        MonotonicClock {
            start: std::time::Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// One warmed, timed measurement round.
#[derive(Debug, Clone)]
pub struct RepeatStats {
    /// Per-iteration wall times, one entry per timed iteration.
    pub latencies_s: Vec<f64>,
    /// Frames per second: iterations * batch_size / elapsed.
    pub fps: f64,
}

/// Full benchmark outcome with every parameter recorded.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub model_id: String,
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub repeats: Vec<RepeatStats>,
    pub fps_mean: f64,
    /// Coefficient of variation of per-repeat FPS (0 for a single repeat).
    pub fps_cv: f64,
}

impl BenchResult {
    pub fn to_delimited(&self) -> String {
        let mut out = format!(
            "model\t{}\nbatch_size\t{}\nwarmup\t{}\niterations\t{}\nrepeats\t{}\n",
            self.model_id,
            self.batch_size,
            self.warmup,
            self.iterations,
            self.repeats.len()
        );
        for (i, r) in self.repeats.iter().enumerate() {
            out.push_str(&format!("repeat_fps\t{}\t{:.3}\n", i, r.fps));
        }
        out.push_str(&format!("fps\t{:.3}\n", self.fps_mean));
        out.push_str(&format!("fps_cv\t{:.4}\n", self.fps_cv));
        out
    }
}

/// Run `repeats` rounds of `warmup` unmeasured plus `iterations` timed calls
/// of `infer`, computing FPS as processed frames over elapsed time.
pub fn measure_fps<C, F>(
    model_id: &str,
    batch_size: usize,
    warmup: usize,
    iterations: usize,
    repeats: usize,
    clock: &mut C,
    mut infer: F,
) -> Result<BenchResult>
where
    C: Clock,
    F: FnMut() -> Result<()>,
{
    if iterations == 0 {
        bail!("benchmark needs at least one timed iteration");
    }
    if repeats == 0 {
        bail!("benchmark needs at least one repeat");
    }
    if batch_size == 0 {
        bail!("benchmark batch size must be positive");
    }

    let mut rounds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        for _ in 0..warmup {
            infer()?;
        }
        let mut latencies = Vec::with_capacity(iterations);
        let round_start = clock.now();
        let mut prev = round_start;
        for _ in 0..iterations {
            infer()?;
            let now = clock.now();
            latencies.push(now - prev);
            prev = now;
        }
        let elapsed = prev - round_start;
        if elapsed <= 0.0 {
            bail!("clock did not advance during the timed block");
        }
        rounds.push(RepeatStats {
            latencies_s: latencies,
            fps: (iterations * batch_size) as f64 / elapsed,
        });
    }

    let fps_values: Vec<f64> = rounds.iter().map(|r| r.fps).collect();
    let mean = fps_values.iter().sum::<f64>() / fps_values.len() as f64;
    let cv = if fps_values.len() > 1 {
        let var = fps_values.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>()
            / fps_values.len() as f64;
        var.sqrt() / mean
    } else {
        0.0
    };

    Ok(BenchResult {
        model_id: model_id.to_string(),
        batch_size,
        warmup,
        iterations,
        repeats: rounds,
        fps_mean: mean,
        fps_cv: cv,
    })
}
