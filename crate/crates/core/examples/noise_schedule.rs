//! The discrete cosine schedule, its posterior coefficients and SNR, and the
//! learned continuous-time schedule at initialization.

use noprop::schedule::{DiscreteSchedule, TrainableGamma};
use noprop::RngStream;

fn main() -> noprop::Result<()> {
    let s = DiscreteSchedule::default_cosine(10)?;
    println!(" t  alpha_bar      a         b         c        SNR");
    for t in 0..=s.steps() {
        let ab = s.alpha_bar(t)?;
        if t == 0 {
            println!("{t:2}  {ab:.6}   {:>9} {:>9} {:>9}  {:9.4}", "-", "-", "-", s.snr(t)?);
            continue;
        }
        let c = s.posterior_coefficients(t)?;
        println!("{t:2}  {ab:.6}  {:9.5} {:9.5} {:9.5}  {:9.4}", c.a, c.b, c.c, s.snr(t)?);
    }
    let total: f64 = (1..=s.steps()).map(|t| s.snr_diff(t)).sum::<noprop::Result<f64>>()?;
    println!("sum of SNR increments {total:.6} = SNR(T) - SNR(0) {:.6}", s.snr(s.steps())? - s.snr(0)?);

    let gamma = TrainableGamma::new(16, &mut RngStream::new(0, &[2]))?;
    println!("\nlearned schedule at init:");
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let p = gamma.eval(t);
        println!("t={t:.2} gamma={:7.3} alpha_bar={:.5} SNR'={:.4}", p.gamma, p.alpha_bar, gamma.snr_prime(t));
    }
    Ok(())
}
