#![allow(dead_code)]

use std::net::TcpListener;
use std::time::Duration;

use ringbench::transport::{Endpoint, Hostfile, TransportConfig};

pub fn quick() -> TransportConfig {
    TransportConfig {
        timeout: Duration::from_secs(10),
    }
}

/// Run `f` on every endpoint at once, one thread each, results in rank
/// order.
pub fn on_all<T, F>(endpoints: &[Endpoint], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&Endpoint) -> T + Sync,
{
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = endpoints.iter().map(|ep| s.spawn(move || f(ep))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// A TCP world on localhost, built from one thread per rank.
pub fn tcp_world(size: usize) -> Vec<Endpoint> {
    let listeners: Vec<TcpListener> = (0..size)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let text: String = listeners
        .iter()
        .enumerate()
        .map(|(r, l)| format!("{r} {}\n", l.local_addr().unwrap()))
        .collect();
    let hostfile = Hostfile::parse(&text).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, l)| {
                let hostfile = &hostfile;
                s.spawn(move || Endpoint::tcp_with_listener(rank, hostfile, l, quick()).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}
