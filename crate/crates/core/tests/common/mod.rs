#![allow(dead_code)]

use fedcoin::shapley::games::FnGame;
use fedcoin::shapley::{Coalition, CoalitionUtility};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random game `v(S) = (Σ w_i)^e + Σ_{i<j ∈ S} c_ij`. Exponents below one
/// make it subadditive, above one superadditive; the pair terms break
/// symmetry further.
pub fn random_game(seed: u64, k: usize) -> FnGame<impl Fn(&Coalition) -> f64 + Send + Sync> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let e: f64 = rng.random_range(0.5..1.5);
    let c: Vec<f64> = (0..k * k).map(|_| rng.random_range(-0.2..0.2)).collect();
    FnGame::new(k, format!("random/{seed}"), move |s: &Coalition| {
        let m: Vec<usize> = s.members().collect();
        let mut v = m.iter().map(|&i| w[i]).sum::<f64>().powf(e);
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                v += c[i * k + j];
            }
        }
        v
    })
}

/// Shapley values by averaging marginal vectors over all `k!` orders
/// (Heap's algorithm). Independent of the library's subset formula.
pub fn permutation_oracle<U: CoalitionUtility + ?Sized>(u: &U) -> Vec<f64> {
    let k = u.players();
    let value = |members: &[usize]| {
        if members.is_empty() {
            0.0
        } else {
            u.value(&Coalition::from_members(k, members.iter().copied())).unwrap()
        }
    };
    let mut order: Vec<usize> = (0..k).collect();
    let mut total = vec![0.0; k];
    let mut count = 0u64;
    let mut visit = |order: &[usize]| {
        let mut prev = 0.0;
        for i in 0..k {
            let v = value(&order[..=i]);
            total[order[i]] += v - prev;
            prev = v;
        }
        count += 1;
    };
    let mut c = vec![0usize; k];
    visit(&order);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            visit(&order);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    total.iter().map(|t| t / count as f64).collect()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
