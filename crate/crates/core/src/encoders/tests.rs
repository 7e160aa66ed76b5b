use super::*;
use crate::numeric::grad_check;
use proptest::prelude::*;
use rand::Rng as _;

fn random_batch(rng: &mut crate::rng::Rng, n: usize, lo: usize, hi: usize, table: usize) -> SeqBatch {
    let mut tokens = Vec::new();
    let mut amounts = Vec::new();
    for _ in 0..n {
        let len = rng.random_range(lo..=hi);
        tokens.push((0..len).map(|_| rng.random_range(1..table)).collect());
        amounts.push((0..len).map(|_| rng.random_range(-3.0..3.0)).collect());
    }
    SeqBatch::new(tokens, amounts).unwrap()
}

fn gru() -> Encoder {
    Encoder::new(EncoderConfig::gru(7, 4, 6), 1).unwrap()
}

fn transformer() -> Encoder {
    Encoder::new(EncoderConfig::transformer(7, 4, 8, 2, 2), 2).unwrap()
}

fn states_of(enc: &Encoder, batch: &SeqBatch) -> Vec<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bind = enc.params.bind(&mut tape, false);
    let h = enc.forward(&mut tape, &bind, batch).unwrap();
    let v = tape.value(h.states).clone();
    (0..batch.len())
        .map(|b| (0..h.lengths[b]).map(|j| v.row_slice(h.row(b, j)).to_vec()).collect())
        .collect()
}

#[test]
fn transaction_embedding_layout() {
    let enc = gru();
    assert_eq!(embed_transaction(&enc, PAD_INDEX, 0.0).unwrap(), vec![0.0; 5]);
    let a = embed_transaction(&enc, 3, 1.0).unwrap();
    let b = embed_transaction(&enc, 3, -2.0).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a[..4], b[..4]);
    assert_ne!(a[4], b[4]);
    assert!(embed_transaction(&enc, 7, 0.0).is_err());
    let batch = SeqBatch::new(vec![vec![9]], vec![vec![0.0]]).unwrap();
    let mut tape = Tape::new();
    let bind = enc.params.bind(&mut tape, false);
    assert!(enc.forward(&mut tape, &bind, &batch).is_err());
}

fn zero_gru(input: usize, hidden: usize) -> ParamStore {
    let mut store = ParamStore::new();
    init_gru(&mut store, "g", input, hidden, &mut stream(0, "t"));
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    store
}

#[test]
fn gru_cell_with_zero_weights_halves_the_state() {
    let store = zero_gru(3, 4);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let p = GruNodes::resolve(&bind, "g").unwrap();
    let x = tape.constant(Tensor::row(&[1.0, -2.0, 0.5]));
    let h = tape.constant(Tensor::row(&[0.2, -0.4, 1.0, 3.0]));
    let out = gru_cell(&mut tape, &p, x, h).unwrap();
    assert_eq!(tape.value(out).data(), &[0.1, -0.2, 0.5, 1.5]);
    assert_eq!(tape.value(out).shape(), &[1, 4]);
    let h0 = tape.constant(Tensor::zeros(&[1, 4]));
    let out = gru_cell(&mut tape, &p, x, h0).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_transaction_gives_single_state() {
    for enc in [gru(), transformer()] {
        let mut s = ClientSequence::new("a", vec![crate::data::Transaction::new(0, 1, 2.0)]);
        s.transactions[0].mcc_idx = 2;
        let h = enc.encode_sequence(&s).unwrap();
        assert_eq!(h.states.len(), 1);
        assert_eq!(h.states[0].len(), enc.hidden());
        assert!(enc.encode_sequence(&ClientSequence::new("e", vec![])).is_err());
    }
}

#[test]
fn recurrent_encoder_is_causal_bit_exact() {
    let enc = gru();
    let mut rng = stream(11, "causal");
    for _ in 0..50 {
        let full = random_batch(&mut rng, 1, 2, 30, 7);
        let len = full.tokens[0].len();
        let cut = rng.random_range(1..len);
        let prefix = SeqBatch::new(vec![full.tokens[0][..cut].to_vec()], vec![full.amounts[0][..cut].to_vec()]).unwrap();
        let mut perturbed = full.clone();
        perturbed.tokens[0][cut] = perturbed.tokens[0][cut] % 6 + 1;
        perturbed.amounts[0][cut] += 1.0;
        let a = states_of(&enc, &full);
        let b = states_of(&enc, &prefix);
        let c = states_of(&enc, &perturbed);
        for j in 0..cut {
            assert_eq!(a[0][j], b[0][j]);
            assert_eq!(a[0][j], c[0][j]);
        }
    }
}

#[test]
fn batching_does_not_change_recurrent_states() {
    let enc = gru();
    let batch = random_batch(&mut stream(3, "b"), 5, 1, 12, 7);
    let together = states_of(&enc, &batch);
    for b in 0..batch.len() {
        let alone = SeqBatch::new(vec![batch.tokens[b].clone()], vec![batch.amounts[b].clone()]).unwrap();
        assert_eq!(states_of(&enc, &alone)[0], together[b]);
    }
}

#[test]
fn transformer_sees_the_whole_sequence() {
    let enc = transformer();
    let batch = random_batch(&mut stream(5, "t"), 1, 8, 8, 7);
    let mut perturbed = batch.clone();
    perturbed.tokens[0][7] = perturbed.tokens[0][7] % 6 + 1;
    let a = states_of(&enc, &batch);
    let b = states_of(&enc, &perturbed);
    assert_ne!(a[0][0], b[0][0]);
}

#[test]
fn transformer_padding_is_neutral() {
    let enc = transformer();
    let batch = random_batch(&mut stream(9, "p"), 4, 2, 15, 7);
    let together = states_of(&enc, &batch);
    for b in 0..batch.len() {
        let alone = SeqBatch::new(vec![batch.tokens[b].clone()], vec![batch.amounts[b].clone()]).unwrap();
        let s = states_of(&enc, &alone);
        for (x, y) in s[0].iter().flatten().zip(together[b].iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

fn hidden_of(states: Vec<Vec<f64>>) -> HiddenSequence {
    let n = states.len();
    HiddenSequence { states, timestamps: (0..n as i64).collect(), summary: None }
}

const ALL: [Pooling; 4] = [Pooling::Last, Pooling::Mean, Pooling::Max, Pooling::First];

#[test]
fn pooling_examples() {
    let v = vec![0.1, -0.7, 3.3];
    for p in ALL {
        assert_eq!(pool_global(&hidden_of(vec![v.clone(); 5]), p).unwrap().vector, v);
        assert_eq!(pool_global(&hidden_of(vec![v.clone()]), p).unwrap().vector, v);
    }
    let h = hidden_of(vec![vec![1.0, 5.0], vec![3.0, -1.0], vec![2.0, 0.0]]);
    assert_eq!(pool_global(&h, Pooling::Max).unwrap().vector, vec![3.0, 5.0]);
    assert_eq!(pool_global(&h, Pooling::Last).unwrap().vector, vec![2.0, 0.0]);
    assert_eq!(pool_global(&h, Pooling::First).unwrap().vector, vec![1.0, 5.0]);
    assert!(pool_global(&hidden_of(vec![]), Pooling::Last).is_err());
    assert_eq!("max".parse::<Pooling>().unwrap(), Pooling::Max);
}

proptest! {
    #[test]
    fn pooling_repeated_vector_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..8), n in 1usize..20) {
        for p in ALL {
            prop_assert_eq!(&pool_global(&hidden_of(vec![v.clone(); n]), p).unwrap().vector, &v);
        }
    }
}

#[test]
fn tape_pooling_matches_sequence_pooling() {
    let enc = gru();
    let batch = random_batch(&mut stream(4, "pool"), 4, 1, 9, 7);
    let states = states_of(&enc, &batch);
    for p in [Pooling::Last, Pooling::Mean, Pooling::Max, Pooling::First] {
        let pooled = enc.embed(&batch, p, 3).unwrap();
        for b in 0..batch.len() {
            let expect = pool_global(&hidden_of(states[b].clone()), p).unwrap().vector;
            for (x, y) in pooled[b].iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn block_store(d: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_block(&mut store, "blk", d, d, &mut stream(seed, "blk"));
    store
}

#[test]
fn attention_rows_are_distributions() {
    let store = block_store(8, 1);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let x = tape.constant(crate::numeric::init_normal(&mut stream(2, "x"), 6, 8, 1.0));
    let out = transformer_block(&mut tape, &bind, "blk", x, 2).unwrap();
    assert_eq!(tape.value(out.out).shape(), &[6, 8]);
    assert_eq!(out.weights.len(), 2);
    for w in &out.weights {
        let w = tape.value(*w);
        for r in 0..w.rows() {
            assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(transformer_block(&mut tape, &bind, "blk", x, 3).is_err());
}

#[test]
fn zero_query_key_projections_attend_uniformly() {
    let mut store = block_store(4, 3);
    for n in ["blk.wq", "blk.wk"] {
        store.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let x = tape.constant(crate::numeric::init_normal(&mut stream(4, "x"), 5, 4, 1.0));
    let out = transformer_block(&mut tape, &bind, "blk", x, 2).unwrap();
    for w in &out.weights {
        assert!(tape.value(*w).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn positional_table_starts_with_sin0_cos0() {
    let pe = positional_encoding(3, 4);
    assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
}

#[test]
fn gru_cell_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = stream(8, "gc");
    init_gru(&mut store, "g", 3, 4, &mut rng);
    for g in ["z", "r", "h"] {
        store.insert(format!("g.b_{g}"), crate::numeric::init_normal(&mut rng, 1, 4, 0.3));
    }
    let x = crate::numeric::init_normal(&mut rng, 2, 3, 1.0);
    let h = crate::numeric::init_normal(&mut rng, 2, 4, 0.5);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let point = store.get(&name).unwrap().clone();
        let err = grad_check(
            |tape, node| {
                let mut bind = store.bind(tape, false);
                bind.set(name.clone(), node);
                let p = GruNodes::resolve(&bind, "g")?;
                let xn = tape.constant(x.clone());
                let hn = tape.constant(h.clone());
                let out = gru_cell(tape, &p, xn, hn)?;
                let sq = tape.square(out)?;
                tape.sum(sq, Axis::All)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn transformer_block_gradients_match_finite_differences() {
    let store = block_store(4, 6);
    let x = crate::numeric::init_normal(&mut stream(7, "x"), 3, 4, 1.0);
    let proj = crate::numeric::init_normal(&mut stream(7, "w"), 4, 1, 1.0);
    let loss = |tape: &mut Tape, bind: &Binding, xn: NodeId| -> Result<NodeId> {
        let out = transformer_block(tape, bind, "blk", xn, 2)?.out;
        let w = tape.constant(proj.clone());
        let y = tape.matmul(out, w)?;
        let t = tape.tanh(y)?;
        tape.sum(t, Axis::All)
    };
    let err = grad_check(
        |tape, xn| {
            let bind = store.bind(tape, false);
            loss(tape, &bind, xn)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "input: {err}");
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let point = store.get(&name).unwrap().clone();
        let err = grad_check(
            |tape, node| {
                let mut bind = store.bind(tape, false);
                bind.set(name.clone(), node);
                let xn = tape.constant(x.clone());
                loss(tape, &bind, xn)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}
