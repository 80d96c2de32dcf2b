//! Generates the bundled covariate-transfer dataset and prints how each
//! held-out condition differs from its controls.

use primeflow::benchmark;
use primeflow::data::{Pseudobulk, Split};
use primeflow::metrics::top_k_degs;

fn main() -> primeflow::Result<()> {
    let ds = benchmark::dataset(0)?;
    println!("{} cells × {} genes", ds.n_cells(), ds.n_genes());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} conditions", ds.groups(Some(split)).len());
    }

    for c in ds.test_conditions() {
        let cells = ds.cells_of(&c, Some(Split::Test));
        let ctrl = ds.controls_of(c.covariate())?;
        let pert = Pseudobulk::from_cells(c.clone(), &cells)?;
        let base = Pseudobulk::from_cells(c.control_of(), &ctrl)?;
        let lfc = primeflow::data::log_fold_change(&pert, &base)?;
        let degs = top_k_degs(&lfc, 5);
        let shown: Vec<String> = degs.iter().map(|&j| format!("{}:{:+.2}", ds.genes()[j], lfc[j])).collect();
        println!("{:<10} {} cells, top DEGs {}", c.key(), cells.nrows(), shown.join(" "));
    }
    Ok(())
}
