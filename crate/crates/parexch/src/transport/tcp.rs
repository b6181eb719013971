//! TCP backend: one rank per OS process, one duplex connection per unordered
//! pair, frames of u32-LE length followed by the payload.
//!
//! Rank 0 is the rendezvous: every other rank registers (u32-LE rank, then
//! its listener port) and receives the peer table back. The pair (0, r)
//! reuses the registration connection; pair (i, j) with 0 < i < j is dialed
//! by j, which introduces itself with a u32-LE rank hello. Addresses are
//! IPv4; `PAREXCH_RENDEZVOUS=host:port` names rank 0's listener.

use super::{BackendKind, Channel, Communicator, Mailbox};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

/// Environment variable naming the rendezvous address in TCP mode.
pub const RENDEZVOUS_ENV: &str = "PAREXCH_RENDEZVOUS";

pub fn rendezvous_from_env() -> Option<String> {
    std::env::var(RENDEZVOUS_ENV).ok()
}

fn write_frame(stream: &mut TcpStream, payload: &[u8]) -> std::io::Result<()> {
    stream.write_all(&(payload.len() as u32).to_le_bytes())?;
    stream.write_all(payload)
}

/// Read one frame; `Ok(None)` on clean EOF at a frame boundary.
fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
    stream.read_exact(&mut payload)?;
    Ok(Some(payload))
}

fn connect_with_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::PeerUnreachable {
                        peer: 0,
                        reason: format!("{addr}: {e}"),
                    });
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn accept_with_deadline(listener: &TcpListener, deadline: Instant) -> Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                listener.set_nonblocking(false)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::TimeoutAny {
                        after: Duration::ZERO,
                    });
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()?
        .find(|a| a.is_ipv4())
        .ok_or_else(|| Error::PeerUnreachable {
            peer: 0,
            reason: format!("no IPv4 address for {addr}"),
        })
}

fn peer_ipv4(stream: &TcpStream) -> Result<Ipv4Addr> {
    match stream.peer_addr()?.ip() {
        IpAddr::V4(ip) => Ok(ip),
        IpAddr::V6(ip) => Err(Error::PeerUnreachable {
            peer: 0,
            reason: format!("IPv6 peer {ip} not supported"),
        }),
    }
}

struct TcpChannel {
    mailbox: Arc<Mailbox>,
    outbound: Vec<Option<Sender<Vec<u8>>>>,
    writers: Vec<JoinHandle<()>>,
}

impl Channel for TcpChannel {
    fn post(&mut self, to: usize, bytes: Vec<u8>) -> Result<()> {
        match &self.outbound[to] {
            Some(tx) => tx.send(bytes).map_err(|_| Error::PeerClosed { peer: to }),
            None => Err(Error::PeerClosed { peer: to }),
        }
    }

    fn take(&mut self, from: usize, timeout: Duration) -> Result<Vec<u8>> {
        self.mailbox.take_from(from, timeout)
    }

    fn take_any(&mut self, timeout: Duration) -> Result<(usize, Vec<u8>)> {
        self.mailbox.take_any(timeout)
    }

    fn shutdown(&mut self) {
        for tx in self.outbound.iter_mut() {
            tx.take();
        }
        for h in self.writers.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for TcpChannel {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_link(
    peer: usize,
    stream: TcpStream,
    mailbox: Arc<Mailbox>,
) -> Result<(Sender<Vec<u8>>, JoinHandle<()>)> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(None)?;

    let mut reader = stream.try_clone()?;
    std::thread::Builder::new()
        .name(format!("tcp-rx-{peer}"))
        .spawn(move || {
            loop {
                match read_frame(&mut reader) {
                    Ok(Some(bytes)) => mailbox.push(peer, bytes),
                    Ok(None) | Err(_) => break,
                }
            }
            mailbox.close(peer);
        })?;

    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let mut writer = stream;
    let handle = std::thread::Builder::new()
        .name(format!("tcp-tx-{peer}"))
        .spawn(move || {
            for bytes in rx {
                if write_frame(&mut writer, &bytes).is_err() {
                    break;
                }
            }
            let _ = writer.shutdown(std::net::Shutdown::Write);
        })?;

    Ok((tx, handle))
}

/// Join a TCP world as `rank` out of `world_size`. Blocks until the full
/// pair mesh is connected or `timeout` expires.
pub fn connect(
    rendezvous: &str,
    rank: usize,
    world_size: usize,
    timeout: Duration,
) -> Result<Communicator> {
    if rank >= world_size {
        return Err(Error::InvalidRank {
            rank,
            world: world_size,
        });
    }
    let deadline = Instant::now() + timeout;
    let mailbox = Mailbox::new(world_size);
    let mut streams: Vec<Option<TcpStream>> = (0..world_size).map(|_| None).collect();

    if world_size > 1 {
        if rank == 0 {
            let addr = resolve(rendezvous)?;
            let listener = TcpListener::bind(addr)?;
            // Collect registrations: u32-LE rank frame, then u32-LE port frame.
            let mut ports = vec![0u16; world_size];
            let mut ips = vec![Ipv4Addr::LOCALHOST; world_size];
            for _ in 1..world_size {
                let mut stream = accept_with_deadline(&listener, deadline)?;
                stream.set_read_timeout(Some(Duration::from_secs(10)))?;
                let reg = read_frame(&mut stream)?.ok_or(Error::PeerClosed { peer: 0 })?;
                let port = read_frame(&mut stream)?.ok_or(Error::PeerClosed { peer: 0 })?;
                if reg.len() != 4 || port.len() != 4 {
                    return Err(Error::ProtocolViolation(
                        "malformed registration".to_string(),
                    ));
                }
                let peer = u32::from_le_bytes(reg.try_into().unwrap()) as usize;
                if peer == 0 || peer >= world_size || streams[peer].is_some() {
                    return Err(Error::InvalidRank {
                        rank: peer,
                        world: world_size,
                    });
                }
                ports[peer] = u32::from_le_bytes(port.try_into().unwrap()) as u16;
                ips[peer] = peer_ipv4(&stream)?;
                streams[peer] = Some(stream);
            }
            // Address book: world_size entries of IPv4 octets + u32-LE port.
            let mut table = Vec::with_capacity(world_size * 8);
            for r in 0..world_size {
                table.extend_from_slice(&ips[r].octets());
                table.extend_from_slice(&(ports[r] as u32).to_le_bytes());
            }
            for s in streams.iter_mut().flatten() {
                write_frame(s, &table)?;
            }
        } else {
            // Bind own listener first so lower-ranked dialers never race it.
            let listener = TcpListener::bind((Ipv4Addr::UNSPECIFIED, 0))?;
            let my_port = listener.local_addr()?.port();

            let mut reg_stream = connect_with_retry(resolve(rendezvous)?, deadline)?;
            write_frame(&mut reg_stream, &(rank as u32).to_le_bytes())?;
            write_frame(&mut reg_stream, &(my_port as u32).to_le_bytes())?;
            reg_stream.set_read_timeout(Some(timeout))?;
            let table = read_frame(&mut reg_stream)?.ok_or(Error::PeerClosed { peer: 0 })?;
            if table.len() != world_size * 8 {
                return Err(Error::ProtocolViolation("malformed peer table".to_string()));
            }
            streams[0] = Some(reg_stream);

            // Dial every lower rank except 0; their listeners exist because
            // they registered before the table went out.
            for peer in 1..rank {
                let e = &table[peer * 8..peer * 8 + 8];
                let ip = Ipv4Addr::new(e[0], e[1], e[2], e[3]);
                let port = u32::from_le_bytes(e[4..8].try_into().unwrap()) as u16;
                let mut stream = connect_with_retry(SocketAddr::from((ip, port)), deadline)?;
                write_frame(&mut stream, &(rank as u32).to_le_bytes())?;
                streams[peer] = Some(stream);
            }
            // Accept every higher rank; the hello frame says who it is.
            for _ in rank + 1..world_size {
                let mut stream = accept_with_deadline(&listener, deadline)?;
                stream.set_read_timeout(Some(Duration::from_secs(10)))?;
                let hello = read_frame(&mut stream)?.ok_or(Error::PeerClosed { peer: rank })?;
                if hello.len() != 4 {
                    return Err(Error::ProtocolViolation("malformed hello".to_string()));
                }
                let peer = u32::from_le_bytes(hello.try_into().unwrap()) as usize;
                if peer <= rank || peer >= world_size || streams[peer].is_some() {
                    return Err(Error::InvalidRank {
                        rank: peer,
                        world: world_size,
                    });
                }
                streams[peer] = Some(stream);
            }
        }
    }

    let mut outbound: Vec<Option<Sender<Vec<u8>>>> = (0..world_size).map(|_| None).collect();
    let mut writers = Vec::new();
    for (peer, slot) in streams.into_iter().enumerate() {
        if let Some(stream) = slot {
            let (tx, handle) = spawn_link(peer, stream, mailbox.clone())?;
            outbound[peer] = Some(tx);
            writers.push(handle);
        }
    }

    Ok(Communicator::from_channel(
        rank,
        world_size,
        BackendKind::Tcp,
        Box::new(TcpChannel {
            mailbox,
            outbound,
            writers,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_port() -> u16 {
        TcpListener::bind((Ipv4Addr::LOCALHOST, 0))
            .unwrap()
            .local_addr()
            .unwrap()
            .port()
    }

    /// Spin up a k-rank TCP world inside one process (threads stand in for
    /// the per-process ranks the CLI uses).
    fn tcp_world<R, F>(world_size: usize, entry: F) -> Vec<R>
    where
        R: Send,
        F: Fn(Communicator) -> R + Send + Sync,
    {
        let rendezvous = format!("127.0.0.1:{}", free_port());
        let entry = &entry;
        let rendezvous = &rendezvous;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..world_size)
                .map(|rank| {
                    scope.spawn(move || {
                        let comm =
                            connect(rendezvous, rank, world_size, Duration::from_secs(10))
                                .unwrap();
                        entry(comm)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn mesh_roundtrip_k3() {
        tcp_world(3, |mut comm| {
            let rank = comm.rank();
            for peer in 0..3 {
                if peer != rank {
                    comm.send(peer, format!("from {rank}").as_bytes()).unwrap();
                }
            }
            for peer in 0..3 {
                if peer != rank {
                    let got = comm.recv(peer).unwrap();
                    assert_eq!(got, format!("from {peer}").as_bytes());
                }
            }
            comm.barrier().unwrap();
        });
    }

    #[test]
    fn fifo_and_counters_match() {
        let counters = tcp_world(2, |mut comm| {
            if comm.rank() == 0 {
                comm.send(1, b"one").unwrap();
                comm.send(1, b"two").unwrap();
            } else {
                assert_eq!(comm.recv(0).unwrap(), b"one");
                assert_eq!(comm.recv(0).unwrap(), b"two");
            }
            comm.barrier().unwrap();
            comm.counters().to_vec()
        });
        // 6 payload bytes plus the 1-byte barrier release / arrive tokens
        assert_eq!(counters[0][1].bytes_sent, 7);
        assert_eq!(counters[1][0].bytes_received, 7);
        assert_eq!(counters[1][0].bytes_sent, 1);
    }
}
