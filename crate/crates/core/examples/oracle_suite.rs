//! The full oracle suite, as run by `noprop check`.

fn main() {
    let report = noprop::check::run_suite();
    for r in &report.results {
        println!("{r}");
    }
    println!("all passed: {}", report.passed());
}
