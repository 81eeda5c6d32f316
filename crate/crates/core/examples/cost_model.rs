//! Attention cost of scoring m candidates against an n-long history, once
//! per impression versus once per request.
//!
//! cargo run --example cost_model -- [n m d]

use roo::cost::formula_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let (n, m, d) = match args[..] {
        [n, m, d] => (n, m, d),
        _ => (1000, 10, 256),
    };
    println!("{}", serde_json::to_string_pretty(&formula_report(n, m, d)?)?);
    println!("\n{:>6} {:>10}", "m", "savings");
    for m in [1, 2, 4, 8, 16, 32] {
        let r = formula_report(n, m, d)?;
        println!("{m:>6} {:>10.4}", r.savings_ratio.unwrap_or(f64::NAN));
    }
    Ok(())
}
