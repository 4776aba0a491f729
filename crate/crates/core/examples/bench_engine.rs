use flowprint::io::synthetic_network;
use flowprint::mux::TrafficSource;
use flowprint::sim::{Engine, SimConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let uni: usize = args.get(1).map_or(50, |s| s.parse().unwrap());
    let bg: usize = args.get(2).map_or(600, |s| s.parse().unwrap());
    let relays = synthetic_network(uni, 1).unwrap();
    let cfg = SimConfig { seed: 9, background_circuits: bg, ..SimConfig::default() };
    let t0 = Instant::now();
    let mut eng = Engine::new(relays, cfg).unwrap();
    println!("new: {:?}", t0.elapsed());
    let client = eng.new_client().unwrap();
    let c = eng.add_client_circuit(client).unwrap();
    eng.add_stream(c, TrafficSource::Bulk).unwrap();
    for chunk in 0..4 {
        let t = Instant::now();
        eng.run(25.0);
        println!("25 s chunk {chunk}: {:?}", t.elapsed());
    }
}
