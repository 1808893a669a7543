//! Brute-force reference implementations of the retrieval metrics.

use flashvtg_core::data::Window;
use flashvtg_core::metrics::Moment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn iou(a: Window, b: Window) -> f64 {
    let lo = a[0].max(b[0]);
    let hi = a[1].min(b[1]);
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `a` ranks before `b`: higher score, then earlier start, then earlier end.
pub fn before(a: &Moment, b: &Moment) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.start != b.start {
        return a.start < b.start;
    }
    a.end < b.end
}

pub fn best_index(ms: &[Moment]) -> usize {
    let mut best = 0;
    for i in 1..ms.len() {
        if before(&ms[i], &ms[best]) {
            best = i;
        }
    }
    best
}

pub fn nms_oracle(ms: &[Moment], thr: f64) -> Vec<Moment> {
    let mut pool = ms.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let top = pool.remove(best_index(&pool));
        pool.retain(|m| iou(m.span(), top.span()) <= thr);
        kept.push(top);
    }
    kept
}

pub fn ranked(ms: &[Moment]) -> Vec<Moment> {
    let mut pool = ms.to_vec();
    let mut out = Vec::new();
    while !pool.is_empty() {
        out.push(pool.remove(best_index(&pool)));
    }
    out
}

pub fn recall_oracle(preds: &[Vec<Moment>], gts: &[Vec<Window>], x: f64) -> f64 {
    let mut hits = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p.is_empty() {
            continue;
        }
        let top = p[best_index(p)];
        if g.iter().any(|w| iou(top.span(), *w) > x) {
            hits += 1.0;
        }
    }
    hits / preds.len() as f64
}

pub fn miou_oracle(preds: &[Vec<Moment>], gts: &[Vec<Window>]) -> f64 {
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p.is_empty() {
            continue;
        }
        let top = p[best_index(p)];
        total += g.iter().map(|w| iou(top.span(), *w)).fold(0.0, f64::max);
    }
    total / preds.len() as f64
}

/// AP as the sum over true positives of the best precision at or after
/// that rank, divided by the number of windows.
pub fn ap_oracle(ms: &[Moment], gts: &[Window], thr: f64) -> f64 {
    let order = ranked(ms);
    let mut used = vec![false; gts.len()];
    let mut is_tp = Vec::new();
    for m in &order {
        let mut pick = None;
        let mut pick_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(m.span(), *g);
            if !used[j] && v >= thr && v > pick_iou {
                pick = Some(j);
                pick_iou = v;
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        is_tp.push(pick.is_some());
    }
    let prec: Vec<f64> = (0..order.len())
        .map(|k| is_tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..order.len() {
        if is_tp[k] {
            let envelope = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += envelope / gts.len() as f64;
        }
    }
    ap
}

pub fn map_oracle(preds: &[Vec<Moment>], gts: &[Vec<Window>]) -> (Vec<f64>, f64) {
    let ts: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let per: Vec<f64> = ts
        .iter()
        .map(|&t| {
            preds
                .iter()
                .zip(gts)
                .map(|(p, g)| ap_oracle(p, g, t - 1e-12))
                .sum::<f64>()
                / preds.len() as f64
        })
        .collect();
    let avg = per.iter().sum::<f64>() / per.len() as f64;
    (per, avg)
}

pub fn hd_oracle(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> (f64, f64, usize) {
    let mut ap = 0.0;
    let mut hit = 0.0;
    let mut n = 0;
    for (p, g) in preds.iter().zip(gts) {
        let rel: Vec<bool> = g.iter().map(|&s| s >= 0.5).collect();
        let n_rel = rel.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        n += 1;
        let rank = |i: usize| {
            1 + (0..p.len())
                .filter(|&j| p[j] > p[i] || (p[j] == p[i] && j < i))
                .count()
        };
        let mut q = 0.0;
        for i in (0..p.len()).filter(|&i| rel[i]) {
            let r = rank(i);
            let above = (0..p.len()).filter(|&j| rel[j] && rank(j) <= r).count();
            q += above as f64 / r as f64;
        }
        ap += q / n_rel as f64;
        let top = (0..p.len()).find(|&i| rank(i) == 1).unwrap();
        if rel[top] {
            hit += 1.0;
        }
    }
    (ap / n as f64, hit / n as f64, n)
}

pub fn random_span(r: &mut ChaCha8Rng, duration: f64) -> Window {
    // Coarse grid so that exact IoU ties and threshold hits occur.
    let a = (r.random_range(0.0..duration) * 2.0).floor() / 2.0;
    let len = ((r.random_range(0.5..duration / 2.0)) * 2.0).ceil() / 2.0;
    [a, (a + len).min(duration)]
}

pub fn random_moments(r: &mut ChaCha8Rng, n: usize, duration: f64) -> Vec<Moment> {
    (0..n)
        .map(|_| {
            let s = random_span(r, duration);
            let score = (r.random_range(0.0f64..1.0) * 8.0).floor() / 8.0;
            Moment::new(s[0], s[1], score)
        })
        .filter(|m| m.end > m.start)
        .collect()
}

pub fn random_instance(seed: u64) -> (Vec<Vec<Moment>>, Vec<Vec<Window>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(1..25);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let duration = r.random_range(10.0..80.0);
        let k = r.random_range(0..12);
        preds.push(random_moments(&mut r, k, duration));
        let g = r.random_range(1..4);
        gts.push(
            (0..g)
                .map(|_| random_span(&mut r, duration))
                .filter(|w| w[1] > w[0])
                .collect::<Vec<_>>(),
        );
        if gts.last().unwrap().is_empty() {
            gts.last_mut().unwrap().push([0.0, duration]);
        }
    }
    (preds, gts)
}
