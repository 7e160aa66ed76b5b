use super::{ClientSequence, Transaction, SECONDS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpliceMode {
    /// `A[..tau]` followed by the tail of `B`.
    Diverge,
    /// `B[..tau]` followed by `A[tau..]`.
    Converge,
}

impl std::str::FromStr for SpliceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diverge" => Ok(Self::Diverge),
            "converge" => Ok(Self::Converge),
            other => Err(Error::invalid(format!("unknown splice mode {other:?}"))),
        }
    }
}

fn gap_before(txns: &[Transaction], i: usize) -> i64 {
    if i == 0 {
        SECONDS_PER_DAY
    } else {
        (txns[i].timestamp - txns[i - 1].timestamp).max(1)
    }
}

fn shifted(txns: &[Transaction], by: i64) -> Vec<Transaction> {
    txns.iter()
        .map(|t| Transaction { timestamp: t.timestamp + by, ..t.clone() })
        .collect()
}

/// Joins halves of two clients at `tau = floor(len(A) / 2)`; the output has
/// the length of `A` and the grafted half is shifted onto `A`'s timeline.
pub fn splice_pair(a: &ClientSequence, b: &ClientSequence, mode: SpliceMode) -> Result<(ClientSequence, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("cannot splice an empty sequence"));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("spliced sequences need at least 2 transactions"));
    }
    let n = a.len();
    let tau = n / 2;
    let at = &a.transactions;
    let bt = &b.transactions;
    let txns = match mode {
        SpliceMode::Converge => {
            if b.len() < tau {
                return Err(Error::invalid(format!("B has {} transactions, {tau} needed", b.len())));
            }
            // B's prefix ends one of its own gaps before A[tau].
            let target_last = at[tau].timestamp - gap_before(bt, tau.min(b.len() - 1)).max(1);
            let by = target_last - bt[tau - 1].timestamp;
            let mut out = shifted(&bt[..tau], by);
            out.extend_from_slice(&at[tau..]);
            out
        }
        SpliceMode::Diverge => {
            let need = n - tau;
            if b.len() < need {
                return Err(Error::invalid(format!("B has {} transactions, {need} needed", b.len())));
            }
            let start = b.len() - need;
            let by = at[tau - 1].timestamp + gap_before(bt, start) - bt[start].timestamp;
            let mut out = at[..tau].to_vec();
            out.extend(shifted(&bt[start..], by));
            out
        }
    };
    let mut seq = ClientSequence::new(format!("{}+{}", a.client_id, b.client_id), txns);
    seq.label = a.label;
    seq.change_points = Some(vec![tau]);
    seq.validate()?;
    Ok((seq, tau))
}
