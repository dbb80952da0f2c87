//! TCP ring transport and rank-0-hub rendezvous.
//!
//! Rank 0 listens on the master address. Every rank opens its own ring
//! listener on an ephemeral port; peers register (rank, ring address) with
//! rank 0, which replies with the full roster once the last rank has joined.
//! Each rank then dials its ring successor and accepts its predecessor.
//! Writes to the successor run on a dedicated sender thread so a full socket
//! buffer can never deadlock the progress worker against a peer doing the
//! same.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::CollectiveError;
use crate::frame::{
    decode_rendezvous_payload, encode_rendezvous_payload, Frame, Header, OpKind, HEADER_LEN,
};
use crate::group::GroupConfig;
use crate::ring::RingLink;

const CONNECT_RETRY: Duration = Duration::from_millis(25);
const ACCEPT_POLL: Duration = Duration::from_millis(10);

fn write_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    stream.write_all(&frame.header.encode())?;
    stream.write_all(&frame.payload)?;
    stream.flush()
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Frame> {
    let mut header_buf = [0u8; HEADER_LEN];
    stream.read_exact(&mut header_buf)?;
    let header = Header::decode(&header_buf)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let mut payload = vec![0u8; header.payload_len as usize];
    stream.read_exact(&mut payload)?;
    Ok(Frame { header, payload })
}

fn rendezvous_frame(group_id: u32, rank: u32, addr: &str) -> Frame {
    let payload = encode_rendezvous_payload(rank, addr);
    Frame {
        header: Header {
            group_id,
            op_seq: 0,
            op_kind: OpKind::Rendezvous,
            phase: 0,
            chunk_index: 0,
            payload_len: payload.len() as u64,
        },
        payload,
    }
}

fn expect_rendezvous(frame: &Frame, group_id: u32) -> Result<(u32, String), CollectiveError> {
    if frame.header.op_kind != OpKind::Rendezvous {
        return Err(CollectiveError::Protocol(format!(
            "expected rendezvous frame, got {:?}",
            frame.header.op_kind
        )));
    }
    if frame.header.group_id != group_id {
        return Err(CollectiveError::Protocol(format!(
            "rendezvous for group {} reached group {}",
            frame.header.group_id, group_id
        )));
    }
    decode_rendezvous_payload(&frame.payload)
}

fn connect_with_retry(
    addr: &str,
    deadline: Instant,
    timeout: Duration,
) -> Result<TcpStream, CollectiveError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(_) if Instant::now() < deadline => thread::sleep(CONNECT_RETRY),
            Err(_) => return Err(CollectiveError::RendezvousTimeout(timeout)),
        }
    }
}

fn accept_with_deadline(
    listener: &TcpListener,
    deadline: Instant,
    timeout: Duration,
) -> Result<TcpStream, CollectiveError> {
    listener
        .set_nonblocking(true)
        .map_err(|e| CollectiveError::Rendezvous(e.to_string()))?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| CollectiveError::Rendezvous(e.to_string()))?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(CollectiveError::RendezvousTimeout(timeout));
                }
                thread::sleep(ACCEPT_POLL);
            }
            Err(e) => return Err(CollectiveError::Rendezvous(e.to_string())),
        }
    }
}

fn host_of(addr: &str) -> Result<&str, CollectiveError> {
    addr.rsplit_once(':')
        .map(|(host, _)| host)
        .ok_or_else(|| CollectiveError::Usage(format!("master address '{addr}' is not host:port")))
}

/// Run the rendezvous protocol and wire up the ring sockets.
pub(crate) fn connect_ring(
    cfg: &GroupConfig,
    master_addr: &str,
) -> Result<TcpLink, CollectiveError> {
    let (rank, world, group_id, timeout) = (cfg.rank, cfg.world, cfg.group_id, cfg.timeout);
    let deadline = Instant::now() + timeout;

    let ring_listener = TcpListener::bind((host_of(master_addr)?, 0))
        .map_err(|e| CollectiveError::Rendezvous(format!("ring listener bind: {e}")))?;
    let ring_addr = ring_listener
        .local_addr()
        .map_err(|e| CollectiveError::Rendezvous(e.to_string()))?
        .to_string();

    let roster: Vec<String> = if rank == 0 {
        let master = TcpListener::bind(master_addr).map_err(|e| {
            CollectiveError::Rendezvous(format!("master bind on {master_addr}: {e}"))
        })?;
        let mut addrs: Vec<Option<String>> = vec![None; world as usize];
        addrs[0] = Some(ring_addr.clone());
        let mut peers: Vec<(u32, TcpStream)> = Vec::new();
        while peers.len() + 1 < world as usize {
            let mut stream = accept_with_deadline(&master, deadline, timeout)?;
            stream
                .set_read_timeout(Some(timeout))
                .map_err(|e| CollectiveError::Rendezvous(e.to_string()))?;
            let frame = read_frame(&mut stream).map_err(|e| CollectiveError::Transport {
                peer: u32::MAX,
                message: format!("rendezvous registration: {e}"),
            })?;
            let (peer_rank, peer_addr) = expect_rendezvous(&frame, group_id)?;
            if peer_rank >= world {
                return Err(CollectiveError::Protocol(format!(
                    "rank {peer_rank} out of range for world {world}"
                )));
            }
            if addrs[peer_rank as usize].is_some() {
                return Err(CollectiveError::Protocol(format!(
                    "duplicate rank {peer_rank} at rendezvous"
                )));
            }
            addrs[peer_rank as usize] = Some(peer_addr);
            peers.push((peer_rank, stream));
        }
        let roster: Vec<String> = addrs.into_iter().map(|a| a.unwrap()).collect();
        for (_, mut stream) in peers {
            for (r, addr) in roster.iter().enumerate() {
                let frame = rendezvous_frame(group_id, r as u32, addr);
                write_frame(&mut stream, &frame).map_err(|e| CollectiveError::Transport {
                    peer: u32::MAX,
                    message: format!("roster send: {e}"),
                })?;
            }
        }
        roster
    } else {
        let mut master = connect_with_retry(master_addr, deadline, timeout)?;
        master
            .set_read_timeout(Some(timeout))
            .map_err(|e| CollectiveError::Rendezvous(e.to_string()))?;
        write_frame(&mut master, &rendezvous_frame(group_id, rank, &ring_addr)).map_err(|e| {
            CollectiveError::Transport {
                peer: 0,
                message: format!("rendezvous registration: {e}"),
            }
        })?;
        let mut roster = vec![String::new(); world as usize];
        for _ in 0..world {
            let frame = read_frame(&mut master).map_err(|e| {
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut
                {
                    CollectiveError::RendezvousTimeout(timeout)
                } else if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    // The hub gave up (its own deadline fired) and closed.
                    CollectiveError::Rendezvous(
                        "rank 0 closed the rendezvous before sending the roster \
                         (a peer never arrived)"
                            .into(),
                    )
                } else {
                    CollectiveError::Transport {
                        peer: 0,
                        message: format!("roster read: {e}"),
                    }
                }
            })?;
            let (r, addr) = expect_rendezvous(&frame, group_id)?;
            roster[r as usize] = addr;
        }
        roster
    };

    if world == 1 {
        return Ok(TcpLink::solo());
    }

    let succ = (rank + 1) % world;
    let pred = (rank + world - 1) % world;

    // Dial the successor, then accept the predecessor; listener backlogs make
    // the connect side complete even before the peer reaches accept.
    let mut succ_stream = connect_with_retry(&roster[succ as usize], deadline, timeout)?;
    write_frame(&mut succ_stream, &rendezvous_frame(group_id, rank, ""))
        .map_err(|e| CollectiveError::transport_io(succ, e))?;

    let mut pred_stream = accept_with_deadline(&ring_listener, deadline, timeout)?;
    pred_stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| CollectiveError::transport_io(pred, e))?;
    let hello = read_frame(&mut pred_stream).map_err(|e| CollectiveError::transport_io(pred, e))?;
    let (hello_rank, _) = expect_rendezvous(&hello, group_id)?;
    if hello_rank != pred {
        return Err(CollectiveError::Protocol(format!(
            "expected ring predecessor {pred}, got rank {hello_rank}"
        )));
    }

    Ok(TcpLink::connected(
        succ_stream,
        pred_stream,
        succ,
        pred,
        timeout,
    ))
}

enum SenderState {
    Solo,
    Running {
        tx: SyncSender<Frame>,
        error: Arc<Mutex<Option<String>>>,
        handle: Option<thread::JoinHandle<()>>,
    },
}

pub(crate) struct TcpLink {
    sender: SenderState,
    pred_stream: Option<TcpStream>,
    succ: u32,
    pred: u32,
}

impl TcpLink {
    fn solo() -> TcpLink {
        TcpLink {
            sender: SenderState::Solo,
            pred_stream: None,
            succ: 0,
            pred: 0,
        }
    }

    fn connected(
        mut succ_stream: TcpStream,
        pred_stream: TcpStream,
        succ: u32,
        pred: u32,
        _timeout: Duration,
    ) -> TcpLink {
        let (tx, rx): (SyncSender<Frame>, Receiver<Frame>) = sync_channel(4);
        let error = Arc::new(Mutex::new(None));
        let error_slot = Arc::clone(&error);
        let handle = thread::Builder::new()
            .name(format!("bks-tx-to-{succ}"))
            .spawn(move || {
                while let Ok(frame) = rx.recv() {
                    if let Err(e) = write_frame(&mut succ_stream, &frame) {
                        *error_slot.lock().unwrap() = Some(e.to_string());
                        return;
                    }
                }
            })
            .expect("spawn tcp sender thread");
        TcpLink {
            sender: SenderState::Running {
                tx,
                error,
                handle: Some(handle),
            },
            pred_stream: Some(pred_stream),
            succ,
            pred,
        }
    }
}

impl RingLink for TcpLink {
    fn successor_rank(&self) -> u32 {
        self.succ
    }

    fn predecessor_rank(&self) -> u32 {
        self.pred
    }

    fn send(&mut self, frame: Frame) -> Result<(), CollectiveError> {
        match &self.sender {
            SenderState::Solo => Ok(()),
            SenderState::Running { tx, error, .. } => tx.send(frame).map_err(|_| {
                let message = error
                    .lock()
                    .unwrap()
                    .clone()
                    .unwrap_or_else(|| "sender thread stopped".into());
                CollectiveError::Transport {
                    peer: self.succ,
                    message,
                }
            }),
        }
    }

    fn recv(&mut self) -> Result<Frame, CollectiveError> {
        let stream = self.pred_stream.as_mut().expect("recv on solo tcp link");
        read_frame(stream).map_err(|e| {
            let message = if e.kind() == std::io::ErrorKind::WouldBlock
                || e.kind() == std::io::ErrorKind::TimedOut
            {
                "read timed out waiting for a matching collective".into()
            } else {
                e.to_string()
            };
            CollectiveError::Transport {
                peer: self.pred,
                message,
            }
        })
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        if let SenderState::Running { tx, handle, .. } = &mut self.sender {
            // Closing the channel lets the sender drain and exit.
            drop(std::mem::replace(tx, sync_channel(1).0));
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}
