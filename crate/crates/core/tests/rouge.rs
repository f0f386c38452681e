use kgxl::rng::Rng;
use kgxl::rouge::{lcs_length, rouge_l, rouge_n, score_all};

/// Clipped overlap by repeated search-and-strike over plain lists.
fn brute_overlap(cand: &[String], refr: &[String], n: usize) -> (usize, usize, usize) {
    let grams = |t: &[String]| -> Vec<Vec<String>> {
        if t.len() < n {
            Vec::new()
        } else {
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        }
    };
    let (c, mut r) = (grams(cand), grams(refr));
    let total_r = r.len();
    let mut hit = 0;
    for g in &c {
        if let Some(pos) = r.iter().position(|x| x == g) {
            r.remove(pos);
            hit += 1;
        }
    }
    (hit, c.len(), total_r)
}

/// Full-table LCS.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn f1(hit: usize, c: usize, r: usize) -> (f64, f64, f64) {
    let p = if c == 0 { 0.0 } else { hit as f64 / c as f64 };
    let rc = if r == 0 { 0.0 } else { hit as f64 / r as f64 };
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

fn random_words(rng: &mut Rng) -> Vec<String> {
    let len = rng.below(25);
    let vocab = 2 + rng.below(12);
    (0..len)
        .map(|_| {
            let w = format!("w{}", rng.below(vocab));
            if rng.bernoulli(0.2) {
                w.to_uppercase()
            } else {
                w
            }
        })
        .collect()
}

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut rng = Rng::new(77);
    for case in 0..1000 {
        let (c, r) = (random_words(&mut rng), random_words(&mut rng));
        let (lc, lr): (Vec<String>, Vec<String>) = (
            c.iter().map(|w| w.to_lowercase()).collect(),
            r.iter().map(|w| w.to_lowercase()).collect(),
        );
        for n in [1, 2] {
            let s = rouge_n(&c, &r, n);
            let (hit, tc, tr) = brute_overlap(&lc, &lr, n);
            assert_eq!((s.precision, s.recall, s.f1), f1(hit, tc, tr), "case {case} n={n}");
        }
        let l = brute_lcs(&lc, &lr);
        assert_eq!(lcs_length(&lc, &lr), l, "case {case}");
        assert_eq!(
            {
                let s = rouge_l(&c, &r);
                (s.precision, s.recall, s.f1)
            },
            f1(l, lc.len(), lr.len()),
            "case {case}"
        );
    }
}

#[test]
fn identical_pairs_score_one() {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let mut x = random_words(&mut rng);
        x.push("end".into());
        x.push("mark".into());
        let s = score_all(&x, &x);
        for v in [s.r1, s.r2, s.rl] {
            assert_eq!((v.precision, v.recall, v.f1), (1.0, 1.0, 1.0));
        }
    }
}

#[test]
fn empty_sides_score_zero() {
    let x: Vec<String> = vec!["a".into()];
    let e: Vec<String> = Vec::new();
    assert_eq!(score_all(&x, &e).r1.f1, 0.0);
    assert_eq!(score_all(&e, &x).rl.f1, 0.0);
    assert_eq!(score_all(&e, &e).r2.f1, 0.0);
}
