#[path = "support/toy_oracle.rs"]
mod toy_oracle;

use dmp::params::ParamKind;
use dmp::prune::PruneManager;
use toy_oracle::{toy, WIDTHS};

#[test]
fn accounting_matches_oracles() {
    assert_eq!(toy_oracle::check_cases(6, 2024), Ok(8));
}
#[test]
fn dense_totals_match_parameter_store() {
    let model = toy();
    let report = PruneManager::register(&model)
        .unwrap()
        .report_for(&WIDTHS.iter().map(|&w| vec![true; w]).collect::<Vec<_>>(), 0);
    let stored: usize = model
        .params
        .ids()
        .filter(|&id| model.params.kind(id) != ParamKind::Alpha)
        .map(|id| model.params.get(id).len())
        .sum();
    assert_eq!(report.totals.total_params, stored as u64);
}
