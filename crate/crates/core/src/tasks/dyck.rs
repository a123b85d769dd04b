//! Dyck languages `D_n`: balanced brackets of `n` types, and the
//! prefix-prediction labels used for training.
//!
//! Strings come from the stochastic grammar
//!
//! ```text
//! S -> |_i S |_i   with probability p/n for each bracket type i
//! S -> S S         with probability q
//! S -> epsilon     with probability 1 - p - q
//! ```
//!
//! The prediction task: reading the string token by token, after every
//! prefix output the *set* of symbols that could legally come next — all
//! `n` openers, plus the closer matching the innermost open bracket when one
//! is open, plus the end symbol when the prefix is balanced.  Every label
//! set therefore has exactly `n + 1` members.
//!
//! Token ids: opener of type `i` is `i`, closer of type `i` is `n + i`.
//! Label classes: the `2n` bracket ids plus class `2n` for the end symbol.

use rand::Rng;

use super::TaskError;

/// Grammar and sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyckParams {
    /// Number of bracket types (2 or 3 in the experiments).
    pub n: usize,
    /// Probability of the nesting rule (split evenly across types).
    pub p: f64,
    /// Probability of the concatenation rule.
    pub q: f64,
}

impl DyckParams {
    pub fn standard(n: usize) -> Self {
        DyckParams { n, p: 0.5, q: 0.25 }
    }

    /// Bracket vocabulary size (`2n`).
    pub fn vocab(&self) -> usize {
        2 * self.n
    }

    /// Label classes: brackets plus the end symbol.
    pub fn label_classes(&self) -> usize {
        2 * self.n + 1
    }

    /// The end-symbol label class.
    pub fn end_class(&self) -> usize {
        2 * self.n
    }

    fn validate(&self) -> Result<(), TaskError> {
        if self.n < 1 || self.n > 6 {
            return Err(TaskError::Malformed {
                what: format!("dyck bracket count {} outside 1..=6", self.n),
            });
        }
        if !(self.p > 0.0 && self.q >= 0.0 && self.p + self.q < 1.0) {
            return Err(TaskError::Malformed {
                what: format!("dyck probabilities p={} q={} need p>0, q>=0, p+q<1", self.p, self.q),
            });
        }
        Ok(())
    }
}

/// One string plus its per-prefix label sets (bit `k` of `labels[t]` set
/// when class `k` may follow `tokens[..=t]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DyckInstance {
    pub n: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<u16>,
}

/// Expand the grammar once, abandoning derivations that exceed `max_len`.
/// Returns `None` on abandonment (caller resamples).
fn expand(params: &DyckParams, max_len: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    enum Item {
        Expand,
        Emit(usize),
    }
    let mut out = Vec::new();
    let mut stack = vec![Item::Expand];
    // The grammar at p + 2q = 1 is critical: derivations can wander long.
    // Budget the number of rule applications instead of trusting luck.
    let mut budget = 64 * max_len.max(1);
    while let Some(item) = stack.pop() {
        match item {
            Item::Emit(tok) => {
                out.push(tok);
                if out.len() > max_len {
                    return None;
                }
            }
            Item::Expand => {
                if budget == 0 {
                    return None;
                }
                budget -= 1;
                let u: f64 = rng.gen();
                if u < params.p {
                    let i = rng.gen_range(0..params.n);
                    out.push(i); // opener
                    if out.len() > max_len {
                        return None;
                    }
                    stack.push(Item::Emit(params.n + i)); // matching closer
                    stack.push(Item::Expand); // inner S
                } else if u < params.p + params.q {
                    stack.push(Item::Expand);
                    stack.push(Item::Expand);
                }
                // else epsilon: emit nothing
            }
        }
    }
    Some(out)
}

const GEN_RETRIES: usize = 100_000;

/// Sample a complete Dyck string with length in `[min_len, max_len]` and
/// compute its prefix labels.
pub fn gen_dyck(
    params: &DyckParams,
    min_len: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<DyckInstance, TaskError> {
    params.validate()?;
    if min_len > max_len || min_len < 2 {
        return Err(TaskError::Malformed {
            what: format!("dyck length bounds {min_len}..={max_len}"),
        });
    }
    for _ in 0..GEN_RETRIES {
        let Some(tokens) = expand(params, max_len, rng) else {
            continue;
        };
        if tokens.len() < min_len {
            continue;
        }
        let labels = prefix_labels(params, &tokens)?;
        return Ok(DyckInstance {
            n: params.n,
            tokens,
            labels,
        });
    }
    Err(TaskError::RetriesExhausted {
        what: "dyck string within length bounds",
    })
}

/// Valid-next label set for one prefix, by stack simulation.
pub fn dyck_oracle(params: &DyckParams, prefix: &[usize]) -> Result<u16, TaskError> {
    params.validate()?;
    let n = params.n;
    let mut stack: Vec<usize> = Vec::new();
    for (pos, &tok) in prefix.iter().enumerate() {
        if tok < n {
            stack.push(tok);
        } else if tok < 2 * n {
            match stack.pop() {
                Some(open) if open == tok - n => {}
                _ => return Err(TaskError::InvalidDyckPrefix { position: pos }),
            }
        } else {
            return Err(TaskError::InvalidDyckPrefix { position: pos });
        }
    }
    let mut set = 0u16;
    for i in 0..n {
        set |= 1 << i; // any opener may always follow
    }
    match stack.last() {
        Some(&open) => set |= 1 << (n + open),
        None => set |= 1 << params.end_class(),
    }
    Ok(set)
}

/// Labels for every prefix `tokens[..=t]`.
pub fn prefix_labels(params: &DyckParams, tokens: &[usize]) -> Result<Vec<u16>, TaskError> {
    (1..=tokens.len())
        .map(|t| dyck_oracle(params, &tokens[..t]))
        .collect()
}

/// Decode a label bitset into sorted class ids (for reports and tests).
pub fn label_classes(set: u16, classes: usize) -> Vec<usize> {
    (0..classes).filter(|k| set & (1 << k) != 0).collect()
}

// ── dataset lines ───────────────────────────────────────────────────────

/// `dyck n=2 input=0,1,3,2 labels=0011,0101,...` with labels as bitstrings,
/// least significant class first.
pub fn render_dyck(inst: &DyckInstance) -> String {
    let classes = 2 * inst.n + 1;
    let labels: Vec<String> = inst
        .labels
        .iter()
        .map(|set| {
            (0..classes)
                .map(|k| if set & (1 << k) != 0 { '1' } else { '0' })
                .collect()
        })
        .collect();
    format!(
        "task=dyck n={} input={} labels={}",
        inst.n,
        inst.tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(","),
        labels.join(",")
    )
}

pub fn parse_dyck(line: &str) -> Result<DyckInstance, TaskError> {
    let bad = |reason: String| TaskError::BadLine {
        line: line.to_string(),
        reason,
    };
    let mut n = None;
    let mut tokens = None;
    let mut labels_raw = None;
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("field `{field}` has no `=`")))?;
        match key {
            "task" => {
                if value != "dyck" {
                    return Err(bad(format!("expected task=dyck, got {value}")));
                }
            }
            "n" => n = Some(value.parse::<usize>().map_err(|_| bad("bad n".to_string()))?),
            "input" => {
                tokens = Some(
                    value
                        .split(',')
                        .map(|p| p.parse::<usize>().map_err(|_| bad(format!("bad token `{p}`"))))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            "labels" => labels_raw = Some(value.to_string()),
            other => return Err(bad(format!("unknown field `{other}`"))),
        }
    }
    let (Some(n), Some(tokens), Some(labels_raw)) = (n, tokens, labels_raw) else {
        return Err(bad("missing n/input/labels".to_string()));
    };
    let mut labels = Vec::new();
    for group in labels_raw.split(',') {
        let mut set = 0u16;
        for (k, ch) in group.chars().enumerate() {
            match ch {
                '1' => set |= 1 << k,
                '0' => {}
                _ => return Err(bad(format!("bad label bit `{ch}`"))),
            }
        }
        labels.push(set);
    }
    if labels.len() != tokens.len() {
        return Err(bad(format!(
            "{} labels for {} tokens",
            labels.len(),
            tokens.len()
        )));
    }
    Ok(DyckInstance { n, tokens, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d2() -> DyckParams {
        DyckParams::standard(2)
    }

    /// Independent validity check: a prefix is valid iff some stack-free
    /// matcher accepts it.  Used to cross-check the oracle from a different
    /// angle: class k may follow prefix iff prefix+k is a valid prefix
    /// (and the end symbol iff the prefix is already balanced).
    fn valid_prefix(n: usize, prefix: &[usize]) -> bool {
        // Matcher: repeatedly delete adjacent "open_i close_i" pairs; the
        // prefix is valid iff what remains is openers only.
        let mut work = prefix.to_vec();
        loop {
            let mut deleted = false;
            let mut i = 0;
            while i + 1 < work.len() {
                if work[i] < n && work[i + 1] == work[i] + n {
                    work.drain(i..i + 2);
                    deleted = true;
                } else {
                    i += 1;
                }
            }
            if !deleted {
                break;
            }
        }
        work.iter().all(|&t| t < n)
    }

    fn reference_label(n: usize, prefix: &[usize]) -> u16 {
        let mut set = 0u16;
        for k in 0..2 * n {
            let mut ext = prefix.to_vec();
            ext.push(k);
            if valid_prefix(n, &ext) {
                set |= 1 << k;
            }
        }
        // End symbol: prefix balanced means the residue after pair deletion
        // is empty.
        let mut ext = prefix.to_vec();
        ext.retain(|_| true);
        if valid_prefix(n, &ext) {
            // balanced iff no unmatched opener remains
            let mut work = prefix.to_vec();
            loop {
                let mut deleted = false;
                let mut i = 0;
                while i + 1 < work.len() {
                    if work[i] < n && work[i + 1] == work[i] + n {
                        work.drain(i..i + 2);
                        deleted = true;
                    } else {
                        i += 1;
                    }
                }
                if !deleted {
                    break;
                }
            }
            if work.is_empty() {
                set |= 1 << (2 * n);
            }
        }
        set
    }

    #[test]
    fn worked_example_open_open_close() {
        // "([]" in D_2: next can be (, [, or ).
        // ids: ( = 0, [ = 1, ) = 2, ] = 3.
        let set = dyck_oracle(&d2(), &[0, 1, 3]).unwrap();
        assert_eq!(label_classes(set, 5), vec![0, 1, 2]);
    }

    #[test]
    fn empty_prefix_allows_openers_and_end() {
        let set = dyck_oracle(&d2(), &[]).unwrap();
        assert_eq!(label_classes(set, 5), vec![0, 1, 4]);
    }

    #[test]
    fn balanced_prefix_allows_openers_and_end() {
        // "()" -> {(, [, eos}
        let set = dyck_oracle(&d2(), &[0, 2]).unwrap();
        assert_eq!(label_classes(set, 5), vec![0, 1, 4]);
    }

    #[test]
    fn oracle_rejects_mismatched_closer() {
        // "(]" is no Dyck prefix.
        let err = dyck_oracle(&d2(), &[0, 3]).unwrap_err();
        assert!(matches!(err, TaskError::InvalidDyckPrefix { position: 1 }));
    }

    #[test]
    fn every_label_set_has_n_plus_one_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2usize, 3] {
            let params = DyckParams::standard(n);
            for _ in 0..200 {
                let inst = gen_dyck(&params, 2, 30, &mut rng).unwrap();
                for set in &inst.labels {
                    assert_eq!(set.count_ones() as usize, n + 1);
                }
            }
        }
    }

    #[test]
    fn generated_strings_balance_and_close_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = d2();
        for _ in 0..500 {
            let inst = gen_dyck(&params, 2, 24, &mut rng).unwrap();
            assert!(inst.tokens.len() >= 2 && inst.tokens.len() <= 24);
            assert_eq!(inst.tokens.len() % 2, 0, "balanced strings have even length");
            // Final label must include the end symbol: the string is complete.
            let last = inst.labels.last().unwrap();
            assert!(last & (1 << params.end_class()) != 0);
        }
    }

    #[test]
    fn oracle_agrees_with_pair_deletion_checker() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2usize, 3] {
            let params = DyckParams::standard(n);
            for _ in 0..300 {
                let inst = gen_dyck(&params, 2, 20, &mut rng).unwrap();
                for t in 1..=inst.tokens.len() {
                    let got = dyck_oracle(&params, &inst.tokens[..t]).unwrap();
                    let want = reference_label(n, &inst.tokens[..t]);
                    assert_eq!(got, want, "prefix {:?}", &inst.tokens[..t]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_under_a_seed() {
        let params = d2();
        let a = gen_dyck(&params, 2, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_dyck(&params, 2, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsatisfiable_bounds_are_reported() {
        // Min length far beyond what max_len admits.
        let err = gen_dyck(&d2(), 50, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, TaskError::Malformed { .. } | TaskError::RetriesExhausted { .. }));
    }

    #[test]
    fn dataset_line_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = gen_dyck(&DyckParams::standard(3), 4, 18, &mut rng).unwrap();
        let line = render_dyck(&inst);
        let back = parse_dyck(&line).unwrap();
        assert_eq!(inst, back);
    }
}
