// Placeholder; filled in as the acceptance suite lands.
fn main() {}
