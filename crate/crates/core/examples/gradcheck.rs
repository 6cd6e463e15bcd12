//! Finite-difference check of every differentiable primitive and of a
//! two-block encoder with adapters and a cosine head.

use adaptcl::gradsuite::{run_suite, SuiteDims};

fn main() -> adaptcl::Result<()> {
    let entries = run_suite(SuiteDims::default(), 1e-6, 1e-3)?;
    for e in &entries {
        println!(
            "{:<30} {} {:>5} coords  max rel err {:.2e}  {}",
            e.name,
            e.precision,
            e.coords,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed).count();
    println!("{failed} failures");
    Ok(())
}
