use stlt_core::layout::TaskMode;
use stlt_core::metrics::{average_precision, ensemble, evaluate_map, evaluate_topk, softmax_rows};
use stlt_engine::{Rng, Tensor};

const INSTANCES: usize = 1000;

/// Scores drawn from a small grid so that ties are common.
fn scores(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    Tensor::new(vec![n, c], (0..n * c).map(|_| rng.below(5) as f64 * 0.25 - 0.5).collect()).unwrap()
}

fn brute_topk(s: &Tensor, labels: &[usize], k: usize) -> f64 {
    let c = s.cols();
    let mut hits = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row = s.row(i);
        let mut classes: Vec<usize> = (0..c).collect();
        // Stable sort keeps lower indices first among equal scores.
        classes.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        if classes[..k].contains(&l) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn brute_ap(col: &[f64], pos: &[bool]) -> Option<f64> {
    let n = col.len();
    let rank = |i: usize| (0..n).filter(|&j| col[j] > col[i] || (col[j] == col[i] && j < i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| pos[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let r = rank(i);
        let above = positives.iter().filter(|&&j| rank(j) <= r).count();
        total += above as f64 / (r + 1) as f64;
    }
    Some(total / positives.len() as f64)
}

#[test]
fn topk_matches_sorted_membership() {
    let mut rng = Rng::seed(1);
    for t in 0..INSTANCES {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(8);
        let s = scores(&mut rng, n, c);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        for k in 1..=c {
            assert_eq!(evaluate_topk(&s, &labels, k).unwrap(), brute_topk(&s, &labels, k), "instance {t} k {k}");
        }
        assert_eq!(evaluate_topk(&s, &labels, c).unwrap(), 1.0);
    }
}

#[test]
fn map_matches_definitional_average_precision() {
    let mut rng = Rng::seed(2);
    let mut checked = 0;
    while checked < INSTANCES {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(8);
        let s = scores(&mut rng, n, c);
        let y: Vec<f64> = (0..n * c).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
        let labels = Tensor::new(vec![n, c], y.clone()).unwrap();
        if y.iter().all(|&v| v == 0.0) {
            assert!(evaluate_map(&s, &labels).is_err());
            continue;
        }
        let got = evaluate_map(&s, &labels).unwrap();
        let mut aps = Vec::new();
        for j in 0..c {
            let col: Vec<f64> = (0..n).map(|i| s.row(i)[j]).collect();
            let pos: Vec<bool> = (0..n).map(|i| y[i * c + j] == 1.0).collect();
            let want = brute_ap(&col, &pos);
            let ap = got.per_class[j];
            assert_eq!(ap.is_none(), want.is_none());
            assert_eq!(got.skipped.contains(&j), want.is_none());
            if let (Some(a), Some(b)) = (ap, want) {
                assert!((a - b).abs() <= 1e-12, "class {j}: {a} vs {b}");
                aps.push(b);
            }
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!((got.map - want).abs() <= 1e-12);
        checked += 1;
    }
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
    assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    // A tie ranks the earlier sample first.
    assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
}

#[test]
fn metric_inputs_are_validated() {
    let s = Tensor::zeros(&[2, 3]);
    assert!(evaluate_topk(&s, &[0, 1], 0).is_err());
    assert!(evaluate_topk(&s, &[0, 1], 4).is_err());
    assert!(evaluate_topk(&s, &[0, 3], 1).is_err());
    assert!(evaluate_topk(&s, &[0], 1).is_err());
    assert!(evaluate_topk(&Tensor::zeros(&[0, 3]), &[], 1).is_err());
    assert!(evaluate_map(&s, &Tensor::zeros(&[2, 2])).is_err());
    assert!(evaluate_map(&s, &Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap()).is_err());
}

#[test]
fn ensemble_averages_normalized_scores() {
    let mut rng = Rng::seed(3);
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(8);
        let a = Tensor::new(vec![n, c], (0..n * c).map(|_| 3.0 * rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![n, c], (0..n * c).map(|_| 3.0 * rng.normal()).collect()).unwrap();
        let single = ensemble(&a, &b, TaskMode::SingleLabel).unwrap();
        let multi = ensemble(&a, &b, TaskMode::MultiLabel).unwrap();
        for i in 0..n {
            let za: f64 = a.row(i).iter().map(|x| x.exp()).sum();
            let zb: f64 = b.row(i).iter().map(|x| x.exp()).sum();
            for j in 0..c {
                let want = (a.row(i)[j].exp() / za + b.row(i)[j].exp() / zb) / 2.0;
                assert!((single.row(i)[j] - want).abs() <= 1e-12);
                let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                let want = (sig(a.row(i)[j]) + sig(b.row(i)[j])) / 2.0;
                assert!((multi.row(i)[j] - want).abs() <= 1e-12);
            }
            assert!((single.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        // Ensembling a model with itself keeps its ranking.
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let same = ensemble(&a, &a, TaskMode::SingleLabel).unwrap();
        assert_eq!(same, softmax_rows(&a).unwrap());
        for k in 1..=c {
            assert_eq!(evaluate_topk(&same, &labels, k).unwrap(), evaluate_topk(&a, &labels, k).unwrap());
        }
    }
    assert!(ensemble(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2]), TaskMode::SingleLabel).is_err());
}
