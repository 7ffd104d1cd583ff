//! Build a tiny graph, run reverse mode, and confirm the gradients with
//! central finite differences.

use noprop::gradcheck::{grad_check, ParamValues};
use noprop::{ComputeGraph, Mode, RngStream, Tensor};

fn main() -> noprop::Result<()> {
    let mut s = RngStream::new(0, &[1]);
    let x = Tensor::randn(&[4, 3], &mut s);
    let labels = [0, 2, 1, 1];

    let mut params = ParamValues::new();
    params.insert("w".into(), Tensor::randn(&[3, 3], &mut s));
    params.insert("b".into(), Tensor::zeros(&[3]));

    let build = |g: &mut ComputeGraph, p: &ParamValues| {
        let xn = g.constant(x.clone());
        let w = g.param("w", &p["w"]);
        let b = g.param("b", &p["b"]);
        let h = g.linear(xn, w, Some(b))?;
        let h = g.tanh(h)?;
        let ce = g.cross_entropy(h, &labels)?;
        g.mean(ce)
    };

    let mut g = ComputeGraph::new(Mode::Train);
    let loss = build(&mut g, &params)?;
    let grads = g.backward(loss)?;
    println!("loss = {:.6} over {} nodes", g.value(loss).item(), g.len());
    for (name, grad) in grads.iter() {
        println!("d loss / d {name} = {:?}", grad.data());
    }

    let report = grad_check(&params, Mode::Train, build, 1e-5);
    println!(
        "finite differences: max rel err {:.2e} over {} entries -> {}",
        report.max_rel_err,
        report.checked,
        if report.passed() { "ok" } else { "MISMATCH" }
    );
    Ok(())
}
