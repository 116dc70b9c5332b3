//! Trace statistics against direct tallies.

use mom::analysis::{load_stats, read_trace_csv, transition_matrix, write_trace_csv, TraceRecord};
use mom::routing::Kind;
use mom_tensor::Rng;

fn random_records(rng: &mut Rng, tokens: usize, steps: usize, n: usize, max_k: usize) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for t in 0..tokens {
        for step in 0..steps {
            for kind in [Kind::Attention, Kind::Ffn] {
                let k = 1 + rng.below(max_k);
                let mut all: Vec<usize> = (0..=n).collect();
                rng.shuffle(&mut all);
                let selected = all[..k].to_vec();
                out.push(TraceRecord {
                    seq: t / 5,
                    pos: t % 5,
                    chunk: 0,
                    step,
                    kind,
                    n_modules: n,
                    gates: vec![1.0 / k as f64; k],
                    selected,
                });
            }
        }
    }
    rng.shuffle(&mut out);
    out
}

#[test]
fn transitions_match_a_pairwise_tally() {
    let mut rng = Rng::new(1);
    let n = 3;
    let records = random_records(&mut rng, 40, 4, n, 3);
    let t = transition_matrix(&records, Kind::Ffn).unwrap();
    assert_eq!(t.size(), n + 1);

    let mut counts = vec![vec![0.0; n + 1]; n + 1];
    for a in records.iter().filter(|r| r.kind == Kind::Ffn) {
        for b in records.iter().filter(|r| r.kind == Kind::Ffn) {
            if (a.seq, a.pos, a.chunk) == (b.seq, b.pos, b.chunk) && b.step == a.step + 1 {
                let w = 1.0 / (a.selected.len() * b.selected.len()) as f64;
                for &i in &a.selected {
                    for &j in &b.selected {
                        counts[i][j] += w;
                    }
                }
            }
        }
    }
    for i in 0..=n {
        let total: f64 = counts[i].iter().sum();
        assert!((t.support[i] - total).abs() < 1e-9);
        for j in 0..=n {
            assert!((t.probs[i][j] - counts[i][j] / total).abs() < 1e-12, "({i},{j})");
        }
    }
}

/// Pearson statistic of `observed` shares of `total` draws against uniform.
fn chi_square(shares: &[f64], total: f64) -> f64 {
    let expected = total / shares.len() as f64;
    shares.iter().map(|s| (s * total - expected).powi(2) / expected).sum()
}

#[test]
fn uniform_random_selections_look_uniform() {
    let mut rng = Rng::new(2);
    let n = 4;
    let records = random_records(&mut rng, 600, 5, n, 1);
    // 99.9th percentiles of chi-square with 4 and 20 degrees of freedom.
    let (crit_row, crit_matrix) = (18.47, 45.31);
    for loads in load_stats(&records).unwrap() {
        let draws = records.iter().filter(|r| r.kind == loads.kind).count() as f64;
        let stat = chi_square(&loads.freq, draws);
        assert!(stat < crit_row, "{}: loads chi-square {stat}", loads.kind);
        assert!((loads.skip_rate - 0.2).abs() < 0.03);
    }
    let t = transition_matrix(&records, Kind::Attention).unwrap();
    let stat: f64 = (0..t.size()).map(|i| chi_square(&t.probs[i], t.support[i])).sum();
    assert!(stat < crit_matrix, "transition chi-square {stat}");
}

#[test]
fn steps_that_are_not_consecutive_are_not_paired() {
    let rec = |step, sel: usize| TraceRecord {
        seq: 0,
        pos: 0,
        chunk: 0,
        step,
        kind: Kind::Attention,
        n_modules: 2,
        selected: vec![sel],
        gates: vec![1.0],
    };
    let t = transition_matrix(&[rec(0, 0), rec(2, 1), rec(3, 2)], Kind::Attention).unwrap();
    assert!(!t.is_supported(0));
    assert_eq!(t.probs[1], vec![0.0, 0.0, 1.0]);
}

#[test]
fn csv_round_trip_and_rejects() {
    let mut rng = Rng::new(3);
    let records = random_records(&mut rng, 6, 2, 2, 2);
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &records).unwrap();
    assert_eq!(read_trace_csv(&buf[..]).unwrap(), records);

    let header_only = b"seq,pos,chunk,step,kind,n_modules,selected,gates\n";
    assert!(read_trace_csv(&header_only[..]).is_err());
    let out_of_range = b"seq,pos,chunk,step,kind,n_modules,selected,gates\n0,0,0,0,A,2,3,1\n";
    assert!(read_trace_csv(&out_of_range[..]).is_err());
}
