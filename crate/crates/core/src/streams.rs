//! Seeded domain-schedule generators.
//!
//! A stream is an ordered list of `(domain, batch_id)` pairs. Every generator
//! empties each domain's pool exactly once; they differ only in how the
//! pools are interleaved.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamKind {
    /// One contiguous block per domain, in index order or in `order`.
    Csc {
        #[serde(default)]
        order: Option<Vec<usize>>,
    },
    /// Slots whose domain mix is drawn from a symmetric Dirichlet.
    CdcDirichlet {
        delta: f64,
        #[serde(default)]
        num_slots: Option<usize>,
    },
    /// Independent draws of the next domain and of its run length.
    Cdc2d {
        #[serde(default)]
        domain_probs: Option<Vec<f64>>,
        #[serde(default)]
        max_run: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub batches_per_domain: Vec<usize>,
    pub kind: StreamKind,
    #[serde(default)]
    pub seed: u64,
}

impl StreamSpec {
    pub fn num_domains(&self) -> usize {
        self.batches_per_domain.len()
    }

    pub fn uniform(num_domains: usize, batches: usize, kind: StreamKind, seed: u64) -> Self {
        Self { batches_per_domain: vec![batches; num_domains], kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_domains();
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if m == 0 {
            return bad("stream needs at least one domain".into());
        }
        match &self.kind {
            StreamKind::Csc { order: Some(order) } => {
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..m).collect::<Vec<_>>() {
                    return bad(format!("order must be a permutation of 0..{m}"));
                }
            }
            StreamKind::Csc { order: None } => {}
            StreamKind::CdcDirichlet { delta, num_slots } => {
                if !(*delta > 0.0 && delta.is_finite()) {
                    return bad(format!("delta must be > 0, got {delta}"));
                }
                if *num_slots == Some(0) {
                    return bad("num_slots must be >= 1".into());
                }
            }
            StreamKind::Cdc2d { domain_probs, max_run } => {
                if let Some(p) = domain_probs {
                    if p.len() != m {
                        return bad(format!("domain_probs needs {m} entries"));
                    }
                    if p.iter().any(|v| !(*v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return bad("domain_probs must be positive and sum to 1".into());
                    }
                }
                if *max_run == Some(0) {
                    return bad("max_run must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub domain: usize,
    pub batch_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DomainStream {
    pub entries: Vec<StreamEntry>,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.domain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_index,domain,batch_id\n");
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(out, "{i},{},{}", e.domain, e.batch_id).expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "batch_index,domain,batch_id" => {}
            _ => return Err(Error::InvalidParameter("missing stream CSV header".into())),
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::InvalidParameter(format!("line {}: bad integer {s:?}", n + 2)))
            };
            if fields.len() != 3 {
                return Err(Error::InvalidParameter(format!("line {}: expected 3 fields", n + 2)));
            }
            if parse(fields[0])? != entries.len() {
                return Err(Error::InvalidParameter(format!("line {}: batch_index out of sequence", n + 2)));
            }
            entries.push(StreamEntry { domain: parse(fields[1])?, batch_id: parse(fields[2])? });
        }
        Ok(Self { entries })
    }
}

pub fn generate(spec: &StreamSpec) -> Result<DomainStream> {
    spec.validate()?;
    match &spec.kind {
        StreamKind::Csc { .. } => gen_csc(spec),
        StreamKind::CdcDirichlet { .. } => gen_cdc_dirichlet(spec),
        StreamKind::Cdc2d { .. } => gen_cdc_2d(spec),
    }
}

/// Emits `count` consecutive batches of `domain` from its pool.
fn take(out: &mut Vec<StreamEntry>, next_id: &mut [usize], domain: usize, count: usize) {
    for _ in 0..count {
        out.push(StreamEntry { domain, batch_id: next_id[domain] });
        next_id[domain] += 1;
    }
}

pub fn gen_csc(spec: &StreamSpec) -> Result<DomainStream> {
    spec.validate()?;
    let StreamKind::Csc { order } = &spec.kind else {
        return Err(Error::InvalidParameter("not a CSC spec".into()));
    };
    let m = spec.num_domains();
    let order = order.clone().unwrap_or_else(|| (0..m).collect());
    let mut next_id = vec![0; m];
    let mut entries = Vec::new();
    for d in order {
        take(&mut entries, &mut next_id, d, spec.batches_per_domain[d]);
    }
    Ok(DomainStream { entries })
}

/// `count` independent random domain orders, for repeated CSC runs.
pub fn random_orders(num_domains: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut o: Vec<usize> = (0..num_domains).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect()
}

/// Symmetric Dirichlet sample computed in log space, so tiny
/// concentrations degrade to a one-hot vector instead of NaN.
pub fn sample_dirichlet<R: Rng + ?Sized>(delta: f64, len: usize, rng: &mut R) -> Vec<f64> {
    // G ~ Gamma(delta) is distributed as Gamma(delta + 1) * U^(1/delta).
    let gamma = Gamma::new(delta + 1.0, 1.0).expect("delta validated");
    let logs: Vec<f64> = (0..len)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / delta
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn gen_cdc_dirichlet(spec: &StreamSpec) -> Result<DomainStream> {
    Ok(DomainStream { entries: dirichlet_slots(spec)?.into_iter().flatten().collect() })
}

/// The Dirichlet schedule split at its slot boundaries. Empty trailing
/// slots are dropped.
pub fn dirichlet_slots(spec: &StreamSpec) -> Result<Vec<Vec<StreamEntry>>> {
    spec.validate()?;
    let StreamKind::CdcDirichlet { delta, num_slots } = &spec.kind else {
        return Err(Error::InvalidParameter("not a Dirichlet CDC spec".into()));
    };
    let m = spec.num_domains();
    let slots = num_slots.unwrap_or(m);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut remaining = spec.batches_per_domain.clone();
    let mut next_id = vec![0; m];
    let mut out = Vec::new();

    for s in 0..slots {
        let left: usize = remaining.iter().sum();
        if left == 0 {
            break;
        }
        let size = if s + 1 == slots {
            left
        } else {
            ((left as f64 / (slots - s) as f64).round() as usize).clamp(1, left)
        };
        let q = sample_dirichlet(*delta, m, &mut rng);

        // Largest-remainder rounding of q * size, capped by each pool.
        let mut alloc: Vec<usize> = q
            .iter()
            .zip(&remaining)
            .map(|(p, &r)| ((p * size as f64).floor() as usize).min(r))
            .collect();
        let mut by_fraction: Vec<usize> = (0..m).collect();
        by_fraction.sort_by(|&a, &b| {
            let fa = q[a] * size as f64 - (q[a] * size as f64).floor();
            let fb = q[b] * size as f64 - (q[b] * size as f64).floor();
            fb.total_cmp(&fa).then(q[b].total_cmp(&q[a]))
        });
        let mut deficit = size - alloc.iter().sum::<usize>();
        for &d in &by_fraction {
            if deficit == 0 {
                break;
            }
            if alloc[d] < remaining[d] && q[d] * size as f64 > alloc[d] as f64 {
                alloc[d] += 1;
                deficit -= 1;
            }
        }
        // Whatever is still missing comes from the heaviest domains that
        // have batches left.
        let mut by_weight: Vec<usize> = (0..m).collect();
        by_weight.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
        for &d in &by_weight {
            if deficit == 0 {
                break;
            }
            let extra = (remaining[d] - alloc[d]).min(deficit);
            alloc[d] += extra;
            deficit -= extra;
        }

        let mut order: Vec<usize> = (0..m).filter(|&d| alloc[d] > 0).collect();
        order.shuffle(&mut rng);
        let mut slot = Vec::with_capacity(size);
        for d in order {
            take(&mut slot, &mut next_id, d, alloc[d]);
            remaining[d] -= alloc[d];
        }
        out.push(slot);
    }
    Ok(out)
}

pub fn gen_cdc_2d(spec: &StreamSpec) -> Result<DomainStream> {
    spec.validate()?;
    let StreamKind::Cdc2d { domain_probs, max_run } = &spec.kind else {
        return Err(Error::InvalidParameter("not a CDC-2D spec".into()));
    };
    let m = spec.num_domains();
    let probs = domain_probs.clone().unwrap_or_else(|| vec![1.0 / m as f64; m]);
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut remaining = spec.batches_per_domain.clone();
    let mut next_id = vec![0; m];
    let mut entries = Vec::new();
    while remaining.iter().any(|&r| r > 0) {
        // Redraw until the chosen pool still has batches.
        let d = loop {
            let u: f64 = rng.random::<f64>() * acc;
            let d = cumulative.iter().position(|&c| u < c).unwrap_or(m - 1);
            if remaining[d] > 0 {
                break d;
            }
        };
        let cap = max_run.map_or(remaining[d], |r| r.min(remaining[d]));
        let run = rng.random_range(1..=cap);
        take(&mut entries, &mut next_id, d, run);
        remaining[d] -= run;
    }
    Ok(DomainStream { entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDiagnostics {
    pub switch_count: usize,
    /// Run length -> number of runs of that length.
    pub run_length_histogram: BTreeMap<usize, usize>,
    pub per_domain_counts: BTreeMap<usize, usize>,
}

pub fn stream_diagnostics(stream: &DomainStream) -> StreamDiagnostics {
    let mut switch_count = 0;
    let mut hist = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut run = 0;
    let mut prev: Option<usize> = None;
    for d in stream.domains() {
        *counts.entry(d).or_insert(0) += 1;
        match prev {
            Some(p) if p == d => run += 1,
            Some(_) => {
                switch_count += 1;
                *hist.entry(run).or_insert(0) += 1;
                run = 1;
            }
            None => run = 1,
        }
        prev = Some(d);
    }
    if run > 0 {
        *hist.entry(run).or_insert(0) += 1;
    }
    StreamDiagnostics { switch_count, run_length_histogram: hist, per_domain_counts: counts }
}

/// True when every domain's ids `0..count` appear exactly once.
pub fn is_conserving(spec: &StreamSpec, stream: &DomainStream) -> bool {
    let mut seen: Vec<Vec<bool>> = spec.batches_per_domain.iter().map(|&c| vec![false; c]).collect();
    for e in &stream.entries {
        match seen.get_mut(e.domain).and_then(|v| v.get_mut(e.batch_id)) {
            Some(slot) if !*slot => *slot = true,
            _ => return false,
        }
    }
    seen.iter().all(|v| v.iter().all(|&b| b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csc(counts: Vec<usize>) -> StreamSpec {
        StreamSpec { batches_per_domain: counts, kind: StreamKind::Csc { order: None }, seed: 0 }
    }

    #[test]
    fn csc_blocks() {
        let s = generate(&csc(vec![2, 2, 2])).unwrap();
        assert_eq!(s.domains().collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        let single = generate(&csc(vec![5])).unwrap();
        assert_eq!(stream_diagnostics(&single).switch_count, 0);
    }

    #[test]
    fn csc_custom_order_is_block_permutation() {
        for order in random_orders(4, 10, 3) {
            let spec = StreamSpec {
                batches_per_domain: vec![3; 4],
                kind: StreamKind::Csc { order: Some(order.clone()) },
                seed: 0,
            };
            let s = generate(&spec).unwrap();
            let blocks: Vec<usize> = s.entries.chunks(3).map(|c| c[0].domain).collect();
            assert_eq!(blocks, order);
            assert!(s.entries.chunks(3).all(|c| c.iter().all(|e| e.domain == c[0].domain)));
        }
        let bad = StreamSpec { batches_per_domain: vec![1; 3], kind: StreamKind::Csc { order: Some(vec![0, 0, 1]) }, seed: 0 };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn alternating_diagnostics() {
        let s = DomainStream {
            entries: [0, 1, 0, 1]
                .iter()
                .enumerate()
                .map(|(i, &d)| StreamEntry { domain: d, batch_id: i / 2 })
                .collect(),
        };
        let diag = stream_diagnostics(&s);
        assert_eq!(diag.switch_count, 3);
        assert_eq!(diag.run_length_histogram, BTreeMap::from([(1, 4)]));
        assert_eq!(diag.per_domain_counts, BTreeMap::from([(0, 2), (1, 2)]));
    }

    #[test]
    fn cdc_2d_single_domain() {
        let spec = StreamSpec { batches_per_domain: vec![17], kind: StreamKind::Cdc2d { domain_probs: None, max_run: Some(3) }, seed: 4 };
        let s = generate(&spec).unwrap();
        assert_eq!(s.len(), 17);
        assert!(s.domains().all(|d| d == 0));
        assert!(is_conserving(&spec, &s));
    }

    #[test]
    fn dirichlet_is_reproducible() {
        let spec = StreamSpec::uniform(5, 8, StreamKind::CdcDirichlet { delta: 1.0, num_slots: None }, 21);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = StreamSpec { seed: 22, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn dirichlet_sample_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for delta in [1e-6, 0.01, 1.0, 100.0] {
            let q = sample_dirichlet(delta, 6, &mut rng);
            assert!(q.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let spec = StreamSpec::uniform(3, 4, StreamKind::Cdc2d { domain_probs: None, max_run: None }, 9);
        let s = generate(&spec).unwrap();
        assert_eq!(DomainStream::from_csv(&s.to_csv()).unwrap(), s);
        assert!(DomainStream::from_csv("a,b,c\n").is_err());
        assert!(DomainStream::from_csv("batch_index,domain,batch_id\n1,0,0\n").is_err());
    }

    #[test]
    fn spec_validation() {
        let bad_delta = StreamSpec::uniform(2, 2, StreamKind::CdcDirichlet { delta: 0.0, num_slots: None }, 0);
        assert!(generate(&bad_delta).is_err());
        let bad_probs = StreamSpec::uniform(2, 2, StreamKind::Cdc2d { domain_probs: Some(vec![0.5, 0.6]), max_run: None }, 0);
        assert!(generate(&bad_probs).is_err());
        let zero_prob = StreamSpec::uniform(2, 2, StreamKind::Cdc2d { domain_probs: Some(vec![0.0, 1.0]), max_run: None }, 0);
        assert!(generate(&zero_prob).is_err());
    }
}
