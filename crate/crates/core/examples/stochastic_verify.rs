//! Rejection sampling over drafted siblings reproduces the target
//! distribution regardless of how poor the draft distribution is.

use padrec::numkit::Rng;
use padrec::specdec::accept_among;

fn main() -> padrec::Result<()> {
    let p = [0.5, 0.3, 0.15, 0.05];
    let q = [0.1, 0.2, 0.3, 0.4];
    let n = 200_000;
    let mut counts = [0usize; 4];
    let mut rng = Rng::new(7);
    for _ in 0..n {
        // two siblings drawn without replacement from q
        let first = sample(&q, &[], &mut rng);
        let second = sample(&q, &[first], &mut rng);
        let mut residual = p.to_vec();
        let token = match accept_among(&mut residual, &q, &[first, second], &mut rng)? {
            Some(i) => [first, second][i],
            None => sample(&residual, &[], &mut rng),
        };
        counts[token] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        println!("token {i}: target {:.3}  sampled {:.3}", p[i], *c as f64 / n as f64);
    }
    Ok(())
}

fn sample(dist: &[f64], skip: &[usize], rng: &mut Rng) -> usize {
    let mass: f64 = dist.iter().enumerate().filter(|(i, _)| !skip.contains(i)).map(|(_, p)| p).sum();
    let u = rng.uniform() * mass;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate().filter(|(i, _)| !skip.contains(i)) {
        cum += p;
        last = i;
        if u < cum {
            break;
        }
    }
    last
}
