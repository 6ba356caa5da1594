//! Checks tape gradients of a small attention block against central
//! finite differences.

use padrec::numkit::{finite_diff_check, CheckConfig, KeyLists, Rng, Tape, Tensor};

fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.normal() as f32 * 0.5).collect()).expect("positive dims")
}

fn loss(p: &[Tensor], grads: bool) -> padrec::Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = p.iter().map(|t| tape.param(t)).collect();
    let (x, wq, wk, wv) = (vars[0], vars[1], vars[2], vars[3]);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let a = tape.attention(q, k, v, 2, KeyLists::causal(5))?;
    let s = tape.silu(a);
    let total = tape.sum(s);
    if grads {
        tape.backward(total)?;
    }
    let g = if grads { vars.iter().map(|&v| tape.grad_tensor(v)).collect() } else { Vec::new() };
    Ok((tape.scalar(total), g))
}

fn main() -> padrec::Result<()> {
    let mut rng = Rng::new(3);
    let mut params = vec![random(&[5, 8], &mut rng), random(&[8, 8], &mut rng), random(&[8, 8], &mut rng), random(&[8, 8], &mut rng)];
    let (_, grads) = loss(&params, true)?;
    let report = finite_diff_check(&["x", "wq", "wk", "wv"], &mut params, &grads, |p| Ok(loss(p, false)?.0), &CheckConfig::default())?;
    for g in &report.groups {
        println!("{:<3} max relative error {:.2e} over {} coordinates", g.name, g.max_rel_err, g.coords);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
