//! Cross-checks the production allocator against the exact rational
//! water-filling oracle in tests/common/exact_alloc.rs.

mod common;

use common::exact_alloc;

#[test]
fn matches_exact_oracle_on_random_instances() {
    exact_alloc::check_allocator(0x0a11_0c01, 1000, false).unwrap();
}

#[test]
fn matches_exact_oracle_with_demand_caps() {
    exact_alloc::check_allocator(0x0a11_0c02, 200, true).unwrap();
}
