use std::time::Instant;

use gestureforge_core::gesture::GestureModel;
use gestureforge_core::landmark::FrameLandmarks;
use serde::Serialize;

/// Per-frame latency of normalization, embedding and head, in milliseconds.
/// All statistics are `None` when nothing was measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub repetitions: usize,
    pub samples: usize,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub max_ms: Option<f64>,
    pub mean_ms: Option<f64>,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Times `model.probabilities` on every frame, `repetitions` times over.
pub fn bench_latency(
    model: &GestureModel,
    frames: &[FrameLandmarks],
    repetitions: usize,
) -> gestureforge_core::Result<LatencyStats> {
    let mut times = Vec::with_capacity(frames.len() * repetitions);
    for _ in 0..repetitions {
        for f in frames {
            let start = Instant::now();
            let p = model.probabilities(std::slice::from_ref(f))?;
            std::hint::black_box(p);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    let stat = |f: &dyn Fn(&[f64]) -> f64| (!times.is_empty()).then(|| f(&times));
    Ok(LatencyStats {
        frames: frames.len(),
        repetitions,
        samples: times.len(),
        p50_ms: stat(&|t| percentile(t, 0.50)),
        p95_ms: stat(&|t| percentile(t, 0.95)),
        max_ms: stat(&|t| t[t.len() - 1]),
        mean_ms: stat(&|t| t.iter().sum::<f64>() / t.len() as f64),
    })
}
