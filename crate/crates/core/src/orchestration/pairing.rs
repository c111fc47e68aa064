use rand::seq::SliceRandom;
use rand::Rng;

use crate::wire::{PlanEntry, Role};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pairing {
    /// `(sender, receiver)` pairs.
    pub pairs: Vec<(u64, u64)>,
    /// The unpaired site on an odd count; it only trains locally.
    pub idle: Vec<u64>,
}

/// Shuffles the active sites and pairs neighbours, first as sender.
pub fn pair_active_sites<R: Rng + ?Sized>(active: &[u64], rng: &mut R) -> Pairing {
    let mut order = active.to_vec();
    order.sort_unstable();
    order.dedup();
    order.shuffle(rng);
    let mut chunks = order.chunks_exact(2);
    let pairs = chunks.by_ref().map(|c| (c[0], c[1])).collect();
    Pairing { pairs, idle: chunks.remainder().to_vec() }
}

impl Pairing {
    /// Plan entries for every paired and idle site, resolving addresses
    /// through `addr`.
    pub fn to_entries<F: Fn(u64) -> (String, u16)>(&self, addr: F) -> Vec<PlanEntry> {
        let entry = |site_id: u64, role: Role, peer_id: Option<u64>| {
            let (host, port) = addr(site_id);
            PlanEntry { site_id, host, port, role, peer_id }
        };
        let mut out = Vec::with_capacity(2 * self.pairs.len() + self.idle.len());
        for &(s, r) in &self.pairs {
            out.push(entry(s, Role::Sender, Some(r)));
            out.push(entry(r, Role::Receiver, Some(s)));
        }
        out.extend(self.idle.iter().map(|&i| entry(i, Role::Idle, None)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn small_counts() {
        let mut rng = derive_rng(0, &[]);
        let p = pair_active_sites(&[4], &mut rng);
        assert!(p.pairs.is_empty());
        assert_eq!(p.idle, vec![4]);
        let p = pair_active_sites(&[0, 1, 2, 3, 4], &mut rng);
        assert_eq!(p.pairs.len(), 2);
        assert_eq!(p.idle.len(), 1);
        assert_eq!(pair_active_sites(&[], &mut rng), Pairing::default());
    }

    #[test]
    fn entries_are_role_consistent() {
        let mut rng = derive_rng(1, &[]);
        let p = pair_active_sites(&[0, 1, 2], &mut rng);
        let entries = p.to_entries(|id| ("127.0.0.1".into(), 7000 + id as u16));
        assert_eq!(entries.len(), 3);
        for e in &entries {
            assert_eq!(e.port, 7000 + e.site_id as u16);
            match e.role {
                Role::Idle => assert!(e.peer_id.is_none()),
                _ => {
                    let peer = entries.iter().find(|x| Some(x.site_id) == e.peer_id).unwrap();
                    assert_eq!(peer.peer_id, Some(e.site_id));
                }
            }
        }
    }
}
