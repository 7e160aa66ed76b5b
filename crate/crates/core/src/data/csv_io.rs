use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ClientSequence, Dataset, Provenance, Transaction};
use crate::error::{Error, Result};

const TXN_HEADER: [&str; 4] = ["client_id", "timestamp", "mcc", "amount"];

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

/// Column positions for `expected`, rejecting missing or extra columns.
fn columns(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<Vec<usize>> {
    let header = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(parse_err(path, 1, e.to_string())),
    };
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::NoRecords);
    }
    let names: Vec<&str> = header.iter().collect();
    for n in &names {
        if !expected.contains(n) {
            return Err(parse_err(path, 1, format!("unexpected column {n:?}")));
        }
    }
    expected
        .iter()
        .map(|want| {
            names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| parse_err(path, 1, format!("missing column {want:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, col: usize, name: &str) -> Result<T> {
    let raw = rec.get(col).ok_or_else(|| parse_err(path, line, format!("missing field {name}")))?;
    raw.parse().map_err(|_| parse_err(path, line, format!("cannot parse {name} from {raw:?}")))
}

/// Reads `client_id,timestamp,mcc,amount` rows, grouped per client in order
/// of first appearance and sorted by time (stable).
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(Error::NoRecords);
    }
    let mut rdr = reader(path)?;
    let cols = columns(path, &mut rdr, &TXN_HEADER)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Transaction>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != TXN_HEADER.len() {
            return Err(parse_err(path, line, format!("expected 4 fields, got {}", rec.len())));
        }
        let client: String = field(path, line, &rec, cols[0], "client_id")?;
        let ts: i64 = field(path, line, &rec, cols[1], "timestamp")?;
        let mcc: i64 = field(path, line, &rec, cols[2], "mcc")?;
        let amount: f64 = field(path, line, &rec, cols[3], "amount")?;
        if !amount.is_finite() {
            return Err(parse_err(path, line, "amount is not finite"));
        }
        if !groups.contains_key(&client) {
            order.push(client.clone());
        }
        groups.entry(client).or_default().push(Transaction::new(ts, mcc, amount));
    }
    if order.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut warnings = Vec::new();
    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut txns = groups.remove(&id).unwrap_or_default();
        if txns.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            let msg = format!("client {id}: rows out of time order, sorted");
            log::warn!("{msg}");
            warnings.push(msg);
            txns.sort_by_key(|t| t.timestamp);
        }
        sequences.push(ClientSequence::new(id, txns));
    }
    let mut ds = Dataset::new(sequences, Provenance::Ingested)?;
    ds.meta.warnings = warnings;
    Ok(ds)
}

/// Attaches `client_id,label` global labels.
pub fn load_labels(dataset: &mut Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let cols = columns(path, &mut rdr, &["client_id", "label"])?;
    let mut labels = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id: String = field(path, line, &rec, cols[0], "client_id")?;
        let y: usize = field(path, line, &rec, cols[1], "label")?;
        labels.insert(id, y);
    }
    for s in &mut dataset.sequences {
        s.label = labels.get(&s.client_id).copied();
    }
    dataset.meta.n_classes = dataset.sequences.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
    Ok(())
}

/// Attaches `client_id,txn_index,label` local labels; positions refer to
/// the time-sorted sequence and missing positions default to 0.
pub fn load_local_labels(dataset: &mut Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let cols = columns(path, &mut rdr, &["client_id", "txn_index", "label"])?;
    let index: BTreeMap<String, usize> =
        dataset.sequences.iter().enumerate().map(|(i, s)| (s.client_id.clone(), i)).collect();
    let mut staged: Vec<Option<Vec<u8>>> = vec![None; dataset.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id: String = field(path, line, &rec, cols[0], "client_id")?;
        let pos: usize = field(path, line, &rec, cols[1], "txn_index")?;
        let y: u8 = field(path, line, &rec, cols[2], "label")?;
        let Some(&ci) = index.get(&id) else {
            return Err(parse_err(path, line, format!("unknown client {id}")));
        };
        let n = dataset.sequences[ci].len();
        if pos >= n {
            return Err(parse_err(path, line, format!("txn_index {pos} beyond length {n}")));
        }
        staged[ci].get_or_insert_with(|| vec![0; n])[pos] = y;
    }
    for (s, l) in dataset.sequences.iter_mut().zip(staged) {
        if l.is_some() {
            s.local_labels = l;
        }
    }
    Ok(())
}

/// Writes `transactions.csv`, `labels.csv`, `local_labels.csv` and
/// `change_points.csv` (`client_id,tau`) into `dir`.
pub fn write_dataset_csv(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut txns = String::from("client_id,timestamp,mcc,amount\n");
    let mut labels = String::from("client_id,label\n");
    let mut local = String::from("client_id,txn_index,label\n");
    let mut cps = String::from("client_id,tau\n");
    for s in &dataset.sequences {
        for t in &s.transactions {
            txns.push_str(&format!("{},{},{},{}\n", s.client_id, t.timestamp, t.mcc_raw, t.amount));
        }
        if let Some(y) = s.label {
            labels.push_str(&format!("{},{y}\n", s.client_id));
        }
        if let Some(l) = &s.local_labels {
            for (i, v) in l.iter().enumerate() {
                local.push_str(&format!("{},{i},{v}\n", s.client_id));
            }
        }
        for tau in s.change_points.iter().flatten() {
            cps.push_str(&format!("{},{tau}\n", s.client_id));
        }
    }
    for (name, body) in [
        ("transactions.csv", txns),
        ("labels.csv", labels),
        ("local_labels.csv", local),
        ("change_points.csv", cps),
    ] {
        crate::pipeline::write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

/// Attaches `client_id,tau` change points.
pub fn load_change_points(dataset: &mut Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let cols = columns(path, &mut rdr, &["client_id", "tau"])?;
    let mut taus: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id: String = field(path, line, &rec, cols[0], "client_id")?;
        let tau: usize = field(path, line, &rec, cols[1], "tau")?;
        taus.entry(id).or_default().push(tau);
    }
    for s in &mut dataset.sequences {
        if let Some(t) = taus.remove(&s.client_id) {
            s.change_points = Some(t);
        }
        s.validate()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn two_rows_one_client() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "client_id,timestamp,mcc,amount\na,10,5411,12.5\na,20,5812,-3\n");
        let d = ingest_csv(&p).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sequences[0].len(), 2);
        assert!(d.meta.warnings.is_empty());
        assert_eq!(d.meta.provenance, Provenance::Ingested);
    }

    #[test]
    fn unsorted_rows_are_sorted_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "client_id,timestamp,mcc,amount\na,30,1,1\nb,5,2,2\na,10,3,3\n");
        let d = ingest_csv(&p).unwrap();
        let ts: Vec<i64> = d.sequences[0].transactions.iter().map(|t| t.timestamp).collect();
        assert_eq!(ts, vec![10, 30]);
        assert_eq!(d.meta.warnings.len(), 1);
    }

    #[test]
    fn error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(&dir, "e.csv", "");
        assert_eq!(ingest_csv(&empty).unwrap_err().to_string(), "no records");
        let header_only = write(&dir, "h.csv", "client_id,timestamp,mcc,amount\n");
        assert!(matches!(ingest_csv(&header_only), Err(Error::NoRecords)));
        let missing = write(&dir, "m.csv", "client_id,timestamp,mcc\na,1,2\n");
        assert!(ingest_csv(&missing).unwrap_err().to_string().contains("missing column"));
        let extra = write(&dir, "x.csv", "client_id,timestamp,mcc,amount,currency\na,1,2,3,USD\n");
        assert!(ingest_csv(&extra).unwrap_err().to_string().contains("unexpected column"));
        let bad = write(&dir, "b.csv", "client_id,timestamp,mcc,amount\na,1,2,3\na,xx,2,3\n");
        let err = ingest_csv(&bad).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn labels_and_local_labels_attach() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "client_id,timestamp,mcc,amount\na,2,1,1\na,1,1,1\nb,1,1,1\n");
        let mut d = ingest_csv(&p).unwrap();
        load_labels(&mut d, write(&dir, "l.csv", "client_id,label\na,1\nb,0\n")).unwrap();
        assert_eq!(d.sequences[0].label, Some(1));
        assert_eq!(d.meta.n_classes, 2);
        load_local_labels(&mut d, write(&dir, "ll.csv", "client_id,txn_index,label\na,1,1\n")).unwrap();
        assert_eq!(d.sequences[0].local_labels, Some(vec![0, 1]));
        assert_eq!(d.sequences[1].local_labels, None);
    }
}
