//! Multi-stream score fusion: weighted per-class sums over four streams and
//! the exact grid search for the best ordered weight tuple.
//!
//! Scores are raw per-class numbers (logits here, but any monotone transform
//! works the same way). A fused prediction for weights (a, b, c, d) is
//! argmax_c of a·r₁[c] + b·r₂[c] + c·r₃[c] + d·r₄[c]. The solver enumerates
//! every tuple on the lattice {step, 2·step, …, 1}⁴ with b > a > c > d and
//! keeps the one with the most correct predictions, breaking ties toward the
//! lexicographically largest (b, a, c, d) so results are reproducible and
//! independent of evaluation order.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

pub const NUM_STREAMS: usize = 4;

/// Per-stream evaluation scores: one row of class scores per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub stream_id: String,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Row-major, num_samples × num_classes.
    pub scores: Vec<f64>,
    pub num_classes: usize,
}

impl ScoreMatrix {
    pub fn new(
        stream_id: impl Into<String>,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        scores: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        let stream_id = stream_id.into();
        if num_classes == 0 {
            return Err(Error::validation("score matrix needs at least one class"));
        }
        if labels.len() != sample_ids.len() || scores.len() != sample_ids.len() * num_classes {
            return Err(Error::validation(format!(
                "stream {stream_id}: {} ids, {} labels, {} scores do not describe \
                 {num_classes}-class rows",
                sample_ids.len(),
                labels.len(),
                scores.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "stream {stream_id}: sample {} has label {} but only {num_classes} classes",
                sample_ids[bad], labels[bad]
            )));
        }
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::validation(format!(
                "stream {stream_id}: non-finite score for sample {}",
                sample_ids[bad / num_classes]
            )));
        }
        Ok(ScoreMatrix { stream_id, sample_ids, labels, scores, num_classes })
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// CSV with header `sample_id,label,s0,s1,...`. Floats are written in
    /// shortest round-trip form, so save → load is exact.
    pub fn to_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sample_id".to_string(), "label".to_string()];
        header.extend((0..self.num_classes).map(|c| format!("s{c}")));
        w.write_record(&header)?;
        let mut field = String::new();
        for i in 0..self.num_samples() {
            let mut rec = vec![self.sample_ids[i].clone(), self.labels[i].to_string()];
            for s in self.row(i) {
                field.clear();
                write!(field, "{s}").expect("write to String");
                rec.push(field.clone());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::validation(format!("flushing score CSV: {e}")))?;
        Ok(())
    }

    pub fn from_csv(stream_id: impl Into<String>, input: impl Read) -> Result<Self> {
        let stream_id = stream_id.into();
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "label" {
            return Err(Error::validation(format!(
                "stream {stream_id}: score CSV header must be sample_id,label,s0,..."
            )));
        }
        let num_classes = header.len() - 2;
        for (c, name) in header.iter().skip(2).enumerate() {
            if name != format!("s{c}") {
                return Err(Error::validation(format!(
                    "stream {stream_id}: score column {} named {name}, expected s{c}",
                    c + 2
                )));
            }
        }
        let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::validation(format!(
                    "stream {stream_id}: row {} has {} fields, header has {}",
                    ids.len() + 1,
                    rec.len(),
                    header.len()
                )));
            }
            ids.push(rec[0].to_string());
            labels.push(rec[1].parse::<usize>().map_err(|_| {
                Error::validation(format!(
                    "stream {stream_id}: sample {}: bad label {:?}",
                    &rec[0], &rec[1]
                ))
            })?);
            for f in rec.iter().skip(2) {
                scores.push(f.parse::<f64>().map_err(|_| {
                    Error::validation(format!(
                        "stream {stream_id}: sample {}: bad score {f:?}",
                        &rec[0]
                    ))
                })?);
            }
        }
        ScoreMatrix::new(stream_id, ids, labels, scores, num_classes)
    }
}

/// All four matrices must agree on classes, sample ids (in order), and
/// labels; reports the offending samples when they do not.
pub fn check_aligned(streams: &[ScoreMatrix; NUM_STREAMS]) -> Result<()> {
    let first = &streams[0];
    for s in &streams[1..] {
        if s.num_classes != first.num_classes {
            return Err(Error::validation(format!(
                "stream {} has {} classes, stream {} has {}",
                s.stream_id, s.num_classes, first.stream_id, first.num_classes
            )));
        }
        if s.num_samples() != first.num_samples() {
            return Err(Error::validation(format!(
                "stream {} has {} samples, stream {} has {}",
                s.stream_id,
                s.num_samples(),
                first.stream_id,
                first.num_samples()
            )));
        }
        let mut bad: Vec<String> = Vec::new();
        for i in 0..first.num_samples() {
            if s.sample_ids[i] != first.sample_ids[i] {
                bad.push(format!(
                    "row {i}: {} vs {}",
                    first.sample_ids[i], s.sample_ids[i]
                ));
            } else if s.labels[i] != first.labels[i] {
                bad.push(format!(
                    "{}: label {} vs {}",
                    s.sample_ids[i], first.labels[i], s.labels[i]
                ));
            }
            if bad.len() >= 8 {
                bad.push("...".into());
                break;
            }
        }
        if !bad.is_empty() {
            return Err(Error::validation(format!(
                "streams {} and {} are misaligned: {}",
                first.stream_id,
                s.stream_id,
                bad.join("; ")
            )));
        }
    }
    Ok(())
}

/// Index of the largest value; exact ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn count_right(streams: &[ScoreMatrix; NUM_STREAMS], w: [f64; 4]) -> usize {
    let k = streams[0].num_classes;
    let mut right = 0;
    for i in 0..streams[0].num_samples() {
        let (r1, r2, r3, r4) =
            (streams[0].row(i), streams[1].row(i), streams[2].row(i), streams[3].row(i));
        let mut best_c = 0;
        let mut best_y = f64::NEG_INFINITY;
        for c in 0..k {
            let y = w[0] * r1[c] + w[1] * r2[c] + w[2] * r3[c] + w[3] * r4[c];
            if y > best_y {
                best_y = y;
                best_c = c;
            }
        }
        right += usize::from(best_c == streams[0].labels[i]);
    }
    right
}

/// Accuracy of one weighted combination; weights must be positive.
pub fn fuse_accuracy(
    streams: &[ScoreMatrix; NUM_STREAMS],
    weights: [f64; 4],
) -> Result<(f64, usize)> {
    check_aligned(streams)?;
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::validation(format!("weights must be positive, got {weights:?}")));
    }
    let right = count_right(streams, weights);
    Ok((right as f64 / streams[0].num_samples() as f64, right))
}

/// Fixed-weight baseline. The preset must respect the stream ordering
/// b ≥ a ≥ c ≥ d (equalities allowed; uniform (1,1,1,1) is the usual one).
pub fn static_fuse(
    streams: &[ScoreMatrix; NUM_STREAMS],
    weights: [f64; 4],
) -> Result<(f64, usize)> {
    let [a, b, c, d] = weights;
    if !(b >= a && a >= c && c >= d) {
        return Err(Error::validation(format!(
            "preset weights (a,b,c,d)={weights:?} violate b ≥ a ≥ c ≥ d"
        )));
    }
    fuse_accuracy(streams, weights)
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionResult {
    /// (a, b, c, d) applied to streams 1..4 in order.
    pub weights: [f64; 4],
    pub accuracy: f64,
    pub right: usize,
    pub zong: usize,
    pub tuples_evaluated: usize,
}

/// Grid levels {step, 2·step, …, 1}; errors when the lattice cannot hold a
/// strictly ordered 4-tuple.
fn grid_levels(step: f64) -> Result<Vec<f64>> {
    if !step.is_finite() || step <= 0.0 || step > 1.0 {
        return Err(Error::validation(format!("grid step {step} must lie in (0, 1]")));
    }
    let count = (1.0 / step + 1e-9).floor() as usize;
    if count < 4 {
        return Err(Error::validation(format!(
            "grid step {step} leaves only {count} levels, too few for b > a > c > d"
        )));
    }
    Ok((1..=count).map(|k| k as f64 * step).collect())
}

#[derive(Clone, Copy)]
struct Candidate {
    right: usize,
    /// Level indices (kb, ka, kc, kd); larger wins ties, making the result
    /// a strict total order independent of evaluation order.
    key: [usize; 4],
}

fn better(new: &Candidate, old: &Candidate) -> bool {
    (new.right, new.key) > (old.right, old.key)
}

/// Exhaustive search over all strictly ordered tuples, optionally sharded
/// over `threads` workers. Sharding never changes the result: every shard
/// reduces with the same total order.
pub fn solve(
    streams: &[ScoreMatrix; NUM_STREAMS],
    step: f64,
    threads: usize,
) -> Result<FusionResult> {
    check_aligned(streams)?;
    let levels = grid_levels(step)?;
    let n_levels = levels.len();
    let threads = threads.clamp(1, n_levels.saturating_sub(3).max(1));
    let shard = |kb_values: Vec<usize>| -> (Option<Candidate>, usize) {
        let mut best: Option<Candidate> = None;
        let mut evaluated = 0;
        for kb in kb_values {
            for ka in 2..kb {
                for kc in 1..ka {
                    for kd in 0..kc {
                        evaluated += 1;
                        let right = count_right(
                            streams,
                            [levels[ka], levels[kb], levels[kc], levels[kd]],
                        );
                        let cand = Candidate { right, key: [kb, ka, kc, kd] };
                        if best.as_ref().is_none_or(|b| better(&cand, b)) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
        (best, evaluated)
    };

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); threads];
    for (i, kb) in (3..n_levels).enumerate() {
        shards[i % threads].push(kb);
    }
    let results: Vec<(Option<Candidate>, usize)> = if threads == 1 {
        vec![shard(shards.remove(0))]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .into_iter()
                .map(|kb_values| scope.spawn(|| shard(kb_values)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("solver shard panicked")).collect()
        })
    };

    let mut best: Option<Candidate> = None;
    let mut tuples_evaluated = 0;
    for (cand, evaluated) in results {
        tuples_evaluated += evaluated;
        if let Some(c) = cand {
            if best.as_ref().is_none_or(|b| better(&c, b)) {
                best = Some(c);
            }
        }
    }
    let best = best.expect("grid guarantees at least one tuple");
    let [kb, ka, kc, kd] = best.key;
    let zong = streams[0].num_samples();
    Ok(FusionResult {
        weights: [levels[ka], levels[kb], levels[kc], levels[kd]],
        accuracy: best.right as f64 / zong as f64,
        right: best.right,
        zong,
        tuples_evaluated,
    })
}

/// The accept-if-improved scan: walk the same grid in plain nested-loop
/// order (a, b, c, d) and keep a tuple only when it strictly increases the
/// correct count. Same maximum as `solve`, but ties resolve to the first
/// tuple found, which is how the original procedure behaves.
pub fn solve_greedy(streams: &[ScoreMatrix; NUM_STREAMS], step: f64) -> Result<FusionResult> {
    check_aligned(streams)?;
    let levels = grid_levels(step)?;
    let n = levels.len();
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut evaluated = 0;
    for ka in 0..n {
        for kb in 0..n {
            for kc in 0..n {
                for kd in 0..n {
                    if !(kb > ka && ka > kc && kc > kd) {
                        continue;
                    }
                    evaluated += 1;
                    let right = count_right(
                        streams,
                        [levels[ka], levels[kb], levels[kc], levels[kd]],
                    );
                    if best.is_none_or(|(r, _)| right > r) {
                        best = Some((right, [ka, kb, kc, kd]));
                    }
                }
            }
        }
    }
    let (right, [ka, kb, kc, kd]) = best.expect("grid guarantees at least one tuple");
    let zong = streams[0].num_samples();
    Ok(FusionResult {
        weights: [levels[ka], levels[kb], levels[kc], levels[kd]],
        accuracy: right as f64 / zong as f64,
        right,
        zong,
        tuples_evaluated: evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(id: &str, rows: &[&[f64]], labels: &[usize]) -> ScoreMatrix {
        let k = rows[0].len();
        ScoreMatrix::new(
            id,
            (0..rows.len()).map(|i| format!("s{i:03}")).collect(),
            labels.to_vec(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            k,
        )
        .unwrap()
    }

    fn onehot_streams() -> [ScoreMatrix; 4] {
        let rows: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        let labels = [0, 1];
        [
            stream("joint", &rows, &labels),
            stream("bone", &rows, &labels),
            stream("jm", &rows, &labels),
            stream("bm", &rows, &labels),
        ]
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn onehot_streams_are_perfect_for_any_positive_weights() {
        let streams = onehot_streams();
        for w in [[0.3, 0.9, 0.2, 0.1], [1.0, 1.0, 1.0, 1.0], [0.05, 0.1, 0.05, 0.01]] {
            let (acc, right) = fuse_accuracy(&streams, w).unwrap();
            assert_eq!((acc, right), (1.0, 2));
        }
        assert!(fuse_accuracy(&streams, [0.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn static_fuse_rejects_ordering_violations() {
        let streams = onehot_streams();
        assert!(static_fuse(&streams, [1.0, 1.0, 1.0, 1.0]).is_ok());
        // a > b is the single-stream trick the constraint exists to reject.
        assert!(static_fuse(&streams, [1.0, 0.01, 0.01, 0.01]).is_err());
    }

    #[test]
    fn misaligned_ids_are_named() {
        let mut streams = onehot_streams();
        streams[2].sample_ids[1] = "zzz".into();
        let err = fuse_accuracy(&streams, [1.0, 1.0, 1.0, 1.0]).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
        let mut streams = onehot_streams();
        streams[1].labels[0] = 1;
        let err = check_aligned(&streams).unwrap_err().to_string();
        assert!(err.contains("s000"), "{err}");
    }

    #[test]
    fn grid_cardinality_matches_binomial() {
        let streams = onehot_streams();
        let res = solve(&streams, 0.05, 1).unwrap();
        assert_eq!(res.tuples_evaluated, 4845);
        let res = solve(&streams, 0.25, 1).unwrap();
        assert_eq!(res.tuples_evaluated, 1);
        assert_eq!(res.weights, [0.75, 1.0, 0.5, 0.25]);
        assert!(solve(&streams, 0.3, 1).is_err());
        assert!(solve(&streams, 1.5, 1).is_err());
        assert!(solve(&streams, 0.0, 1).is_err());
    }

    #[test]
    fn constant_objective_returns_lexicographically_largest_tuple() {
        let streams = onehot_streams();
        let res = solve(&streams, 0.2, 1).unwrap();
        // Five levels; the largest (b, a, c, d) with b > a > c > d.
        assert_eq!(res.weights, [0.8, 1.0, 0.6000000000000001, 0.4]);
        assert_eq!(res.right, 2);
    }

    #[test]
    fn sharding_does_not_change_the_answer() {
        let rows1: Vec<&[f64]> = vec![&[0.9, 0.4, 0.1], &[0.3, 0.5, 0.2], &[0.1, 0.2, 0.9]];
        let rows2: Vec<&[f64]> = vec![&[0.2, 0.8, 0.3], &[0.9, 0.1, 0.4], &[0.3, 0.3, 0.3]];
        let labels = [0, 1, 2];
        let streams = [
            stream("joint", &rows1, &labels),
            stream("bone", &rows2, &labels),
            stream("jm", &rows2, &labels),
            stream("bm", &rows1, &labels),
        ];
        let one = solve(&streams, 0.1, 1).unwrap();
        for threads in [2, 3, 7, 64] {
            let sharded = solve(&streams, 0.1, threads).unwrap();
            assert_eq!(sharded.weights, one.weights);
            assert_eq!(sharded.right, one.right);
            assert_eq!(sharded.tuples_evaluated, one.tuples_evaluated);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows: Vec<&[f64]> = vec![&[0.1, -2.5e-7, 3.0], &[1.0 / 3.0, f64::MIN_POSITIVE, -0.0]];
        let m = stream("joint", &rows, &[2, 0]);
        let mut buf = Vec::new();
        m.to_csv(&mut buf).unwrap();
        let back = ScoreMatrix::from_csv("joint", buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(ScoreMatrix::from_csv("x", "id,label,s0\na,0,1.0".as_bytes()).is_err());
        assert!(ScoreMatrix::from_csv("x", "sample_id,label,s1\na,0,1.0".as_bytes()).is_err());
        assert!(
            ScoreMatrix::from_csv("x", "sample_id,label,s0\na,3,1.0".as_bytes()).is_err()
        );
        assert!(
            ScoreMatrix::from_csv("x", "sample_id,label,s0\na,0,oops".as_bytes()).is_err()
        );
    }
}
