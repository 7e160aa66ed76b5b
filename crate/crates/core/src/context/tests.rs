use super::*;
use crate::data::Transaction;
use crate::encoders::EncoderConfig;
use crate::numeric::grad_check;
use proptest::prelude::*;
use rand::Rng as _;

fn store(entries: &[(&str, &[(i64, Vec<f64>)])]) -> EmbeddingStore {
    let dim = entries.iter().flat_map(|(_, e)| e.iter()).next().map_or(2, |(_, v)| v.len());
    EmbeddingStore {
        dim,
        clients: entries
            .iter()
            .map(|(id, e)| StoredClient {
                client_id: id.to_string(),
                timestamps: e.iter().map(|(t, _)| *t).collect(),
                embeddings: e.iter().map(|(_, v)| v.clone()).collect(),
            })
            .collect(),
    }
}

fn sample_store() -> EmbeddingStore {
    store(&[
        ("a", &[(10, vec![1.0, 0.0]), (20, vec![2.0, 0.0])]),
        ("b", &[(15, vec![0.0, 1.0])]),
        ("c", &[(30, vec![5.0, 5.0])]),
    ])
}

#[test]
fn queries_are_strictly_in_the_past() {
    let s = sample_store();
    assert!(s.query(10, None).is_empty());
    let q = s.query(20, None);
    assert_eq!(q.clients, vec![0, 1]);
    assert_eq!(q.columns, vec![&[1.0, 0.0][..], &[0.0, 1.0][..]]);
    let late = query_store(&s, 100, None);
    assert_eq!(late.columns, vec![&[2.0, 0.0][..], &[0.0, 1.0][..], &[5.0, 5.0][..]]);
    let ex = s.query(100, Some("b"));
    assert_eq!(ex.clients, vec![0, 2]);
}

proptest! {
    #[test]
    fn every_contributor_precedes_the_query(t in 0i64..40) {
        let s = sample_store();
        let q = s.query(t, None);
        for (&c, col) in q.clients.iter().zip(&q.columns) {
            let k = s.clients[c].embeddings.iter().position(|e| e.as_slice() == *col).unwrap();
            prop_assert!(s.clients[c].timestamps[k] < t);
        }
    }
}

fn columns(seed: u64, n: usize, m: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "ctx.columns");
    (0..n).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn view(c: &[Vec<f64>]) -> Vec<&[f64]> {
    c.iter().map(|v| v.as_slice()).collect()
}

#[test]
fn identical_columns_are_returned_by_every_method() {
    let c = vec![0.3, -1.7, 2.25];
    let x = vec![c.clone(); 7];
    let h = [0.5, 0.1, -0.4];
    let a = AttentionParams::init(3, 0.3, 1).a;
    for method in ContextMethod::ALL {
        let aref = (method == ContextMethod::Learnable).then_some(&a);
        let b = aggregate_context(&view(&x), &h, method, aref).unwrap();
        assert!(b.vector.iter().zip(&c).all(|(u, v)| (u - v).abs() < 1e-12), "{method}");
        assert_eq!(b.n_contributing, 7);
    }
}

#[test]
fn attention_over_basis_vectors() {
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let b = aggregate_context(&view(&x), &[1.0, 0.0], ContextMethod::Attention, None).unwrap();
    assert!((b.vector[0] - 0.73106).abs() < 1e-5);
    assert!((b.vector[1] - 0.26894).abs() < 1e-5);
}

#[test]
fn identity_matrix_reproduces_plain_attention_bit_exactly() {
    for seed in 0..20 {
        let x = columns(seed, 9, 5);
        let h = &columns(seed + 100, 1, 5)[0];
        let plain = aggregate_context(&view(&x), h, ContextMethod::Attention, None).unwrap();
        let learn = aggregate_context(&view(&x), h, ContextMethod::Learnable, Some(&Tensor::identity(5))).unwrap();
        assert_eq!(plain.vector, learn.vector);
    }
}

#[test]
fn empty_context_falls_back_to_zero() {
    let b = aggregate_context(&[], &[1.0, 2.0], ContextMethod::Mean, None).unwrap();
    assert_eq!(b.vector, vec![0.0, 0.0]);
    assert!(b.fallback);
    assert_eq!(b.n_contributing, 0);
    assert_eq!(augment(&[1.0, 2.0], &b.vector).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
    assert_eq!(augment(&[1.0], &[3.0]).unwrap(), vec![1.0, 3.0]);
    assert!(augment(&[1.0], &[3.0, 4.0]).is_err());
}

#[test]
fn aggregation_rejects_bad_inputs() {
    let x = vec![vec![1.0, 0.0]];
    assert!(aggregate_context(&view(&x), &[1.0], ContextMethod::Mean, None).is_err());
    assert!(aggregate_context(&view(&x), &[1.0, 0.0], ContextMethod::Learnable, None).is_err());
    assert!(aggregate_context(&view(&x), &[1.0, 0.0], ContextMethod::Learnable, Some(&Tensor::identity(3))).is_err());
    assert!(aggregate_context(&view(&x), &[1.0, 0.0], ContextMethod::Max, Some(&Tensor::identity(2))).is_err());
}

proptest! {
    #[test]
    fn aggregates_stay_in_the_convex_hull_and_ignore_column_order(seed in 0u64..1000) {
        let x = columns(seed, 6, 4);
        let h = &columns(seed + 7, 1, 4)[0];
        let a = AttentionParams::init(4, 0.5, seed).a;
        let mut shuffled = x.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut stream(seed, "shuffle"));
        for method in ContextMethod::ALL {
            let aref = (method == ContextMethod::Learnable).then_some(&a);
            let b = aggregate_context(&view(&x), h, method, aref).unwrap();
            let p = aggregate_context(&view(&shuffled), h, method, aref).unwrap();
            for k in 0..4 {
                let lo = x.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
                let hi = x.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(b.vector[k] >= lo - 1e-12 && b.vector[k] <= hi + 1e-12);
                prop_assert!((b.vector[k] - p.vector[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_keep_their_ordering_under_scaling(seed in 0u64..1000) {
        let x = columns(seed, 6, 4);
        let h = &columns(seed + 7, 1, 4)[0];
        let argmax = |h: &[f64]| {
            let s: Vec<f64> = x.iter().map(|c| c.iter().zip(h).map(|(a, b)| a * b).sum()).collect();
            let w = crate::numeric::softmax(&s).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            Ok(crate::evaluation::argmax(&w))
        };
        let base = argmax(h)?;
        for lambda in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = h.iter().map(|v| v * lambda).collect();
            prop_assert_eq!(argmax(&scaled)?, base);
        }
    }
}

#[test]
fn tape_attention_matches_and_passes_gradient_checks() {
    let x = columns(3, 5, 4);
    let h = columns(4, 1, 4).remove(0);
    let a = AttentionParams::init(4, 0.2, 3).a;
    let rows = Tensor::from_rows(&x).unwrap();
    let mut tape = Tape::new();
    let (rn, hn, an) = (tape.constant(rows.clone()), tape.constant(Tensor::row(&h)), tape.constant(a.clone()));
    let b = attention_context(&mut tape, rn, hn, Some(an)).unwrap();
    let plain = aggregate_context(&view(&x), &h, ContextMethod::Learnable, Some(&a)).unwrap();
    for (u, v) in tape.value(b).data().iter().zip(&plain.vector) {
        assert!((u - v).abs() < 1e-12);
    }
    let weights = Tensor::row(&[0.3, -1.1, 0.7, 0.2]);
    let readout = move |t: &mut Tape, out: NodeId| -> Result<NodeId> {
        let w = t.constant(weights.clone());
        let p = t.mul(out, w)?;
        t.sum(p, crate::numeric::Axis::All)
    };
    let (r1, h1, a1) = (rows.clone(), h.clone(), a.clone());
    let through_a = grad_check(
        |t, an| {
            let (rn, hn) = (t.constant(r1.clone()), t.constant(Tensor::row(&h1)));
            let b = attention_context(t, rn, hn, Some(an))?;
            readout(t, b)
        },
        &a,
        1e-5,
    )
    .unwrap();
    let through_x = grad_check(
        |t, rn| {
            let (hn, an) = (t.constant(Tensor::row(&h)), t.constant(a1.clone()));
            let b = attention_context(t, rn, hn, Some(an))?;
            readout(t, b)
        },
        &rows,
        1e-5,
    )
    .unwrap();
    assert!(through_a < 1e-4 && through_x < 1e-4, "{through_a} {through_x}");
}

fn sequences(n: usize, len: usize, seed: u64) -> Vec<ClientSequence> {
    let mut rng = stream(seed, "ctx.seqs");
    (0..n)
        .map(|c| {
            let start = rng.random_range(0..1000);
            let tx = (0..len)
                .map(|i| {
                    let mut t = Transaction::new(start + 100 * i as i64, 0, 0.0);
                    t.mcc_idx = rng.random_range(1..6);
                    t.amount_transformed = rng.random_range(-1.0..1.0);
                    t
                })
                .collect();
            ClientSequence::new(format!("c{c}"), tx)
        })
        .collect()
}

fn encoder() -> Encoder {
    Encoder::new(EncoderConfig::gru(8, 3, 4), 2).unwrap()
}

#[test]
fn build_store_samples_clients_and_keeps_the_hidden_width() {
    let seqs = sequences(10, 50, 1);
    let enc = encoder();
    let w = WindowConfig { w: 8, s: 4 };
    let one = build_store(&enc, Pooling::Last, &seqs, 1, w, 3).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.dim, enc.hidden());
    one.validate().unwrap();
    let a = build_store(&enc, Pooling::Last, &seqs, 4, w, 3).unwrap();
    let b = build_store(&enc, Pooling::Last, &seqs, 4, w, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.clients[0].timestamps.len(), w.ends(50).len());
    assert!(build_store(&enc, Pooling::Last, &seqs, 0, w, 3).is_err());
    assert!(build_store(&enc, Pooling::Last, &[], 1, w, 3).is_err());
    assert!(build_store(&enc, Pooling::Last, &seqs, 11, w, 3).is_err());
}

#[test]
fn store_bytes_round_trip() {
    let s = build_store(&encoder(), Pooling::Last, &sequences(5, 30, 2), 3, WindowConfig { w: 8, s: 4 }, 1).unwrap();
    let bytes = s.to_bytes();
    assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);
    assert!(matches!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
}

#[test]
fn augmented_rows_double_the_width() {
    let s = sample_store();
    let rows = LabeledRows {
        x: vec![vec![1.0, 1.0], vec![0.0, 2.0]],
        y: vec![0, 1],
        clients: vec!["a".into(), "z".into()],
        timestamps: vec![25, 5],
    };
    let out = augment_rows(&s, &rows, ContextMethod::Mean, None).unwrap();
    // first row: only b is before 25 once a is excluded
    assert_eq!(out.x[0], vec![1.0, 1.0, 0.0, 1.0]);
    assert_eq!(out.x[1], vec![0.0, 2.0, 0.0, 0.0]);
}

#[test]
fn attention_matrix_gradient_and_training() {
    let seqs = sequences(12, 40, 5);
    let enc = encoder();
    let s = build_store(&enc, Pooling::Last, &seqs, 8, WindowConfig { w: 8, s: 2 }, 1).unwrap();
    let cfg = AttentionTrainConfig { epochs: 2, batch_size: 6, slice_min: 5, slice_max: 12, lr: 1e-2, ..Default::default() };
    let p = AttentionParams::init(4, 0.01, 1);
    let refs: Vec<&ClientSequence> = seqs.iter().collect();
    let (_, g) = attention_gradient(&p, &s, &enc, Pooling::Last, &refs, &cfg, 0).unwrap().unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));

    let mut zero = s.clone();
    zero.clients.iter_mut().flat_map(|c| c.embeddings.iter_mut()).for_each(|e| e.iter_mut().for_each(|v| *v = 0.0));
    let (_, g0) = attention_gradient(&p, &zero, &enc, Pooling::Last, &refs, &cfg, 0).unwrap().unwrap();
    assert!(g0.data().iter().all(|&v| v == 0.0));

    let (a1, h1) = train_attention_matrix(&s, &enc, Pooling::Last, &seqs, &cfg, 9).unwrap();
    let (a2, h2) = train_attention_matrix(&s, &enc, Pooling::Last, &seqs, &cfg, 9).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(h1, h2);
    assert_eq!(h1.len(), 2);
    assert_ne!(a1.a, AttentionParams::init(4, 0.01, 9).a);
    let empty = EmbeddingStore { dim: 4, clients: vec![] };
    assert!(train_attention_matrix(&empty, &enc, Pooling::Last, &seqs, &cfg, 9).is_err());
}
