//! Peak live graph size per update: flat in depth for block-local training,
//! growing with depth for the end-to-end baseline.

use noprop::check::bench_mem;

fn main() -> noprop::Result<()> {
    println!("   T   dt  backprop");
    for deep in [2, 4, 6, 8, 10] {
        let b = bench_mem(1, deep)?;
        println!("{deep:4} {:4} {:9}", b.dt.1, b.backprop.1);
    }
    let b = bench_mem(2, 10)?;
    println!("T=2 -> T=10: dt x{:.2}, backprop x{:.2}", b.dt_ratio(), b.backprop_ratio());
    Ok(())
}
