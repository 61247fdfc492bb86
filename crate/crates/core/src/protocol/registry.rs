use std::collections::BTreeMap;

use crate::group::{GroupElement, GroupParams};

use super::{ClientState, ProtocolError};

/// All registered clients together with the public-key directory the server
/// relays between them.
#[derive(Debug, Clone)]
pub struct ClientPool {
    params: GroupParams,
    clients: BTreeMap<u64, ClientState>,
    directory: BTreeMap<u64, GroupElement>,
}

impl ClientPool {
    pub fn new(params: GroupParams) -> Self {
        Self {
            params,
            clients: BTreeMap::new(),
            directory: BTreeMap::new(),
        }
    }

    /// Initial setup: registers every client, then has each one derive a
    /// shared key with every other.
    pub fn setup(params: GroupParams, clients: Vec<ClientState>) -> Result<Self, ProtocolError> {
        let mut pool = Self::new(params);
        for c in clients {
            let id = c.id();
            if pool.clients.contains_key(&id) {
                return Err(ProtocolError::Usage(format!(
                    "client {id} registered twice"
                )));
            }
            pool.directory.insert(id, c.keys.public_key().clone());
            pool.clients.insert(id, c);
        }
        let directory = pool.directory.clone();
        for (id, client) in pool.clients.iter_mut() {
            for (peer, pk) in &directory {
                if peer != id {
                    client.keys.derive_shared(pk, *peer)?;
                }
            }
        }
        Ok(pool)
    }

    /// Registers a new client: its public key is broadcast, every existing
    /// client derives the new pairwise key, and the newcomer derives keys
    /// with everyone already present.
    pub fn join(&mut self, mut client: ClientState) -> Result<(), ProtocolError> {
        let id = client.id();
        if self.clients.contains_key(&id) {
            return Err(ProtocolError::Usage(format!(
                "client {id} is already registered"
            )));
        }
        let pk = client.keys.public_key().clone();
        if !self.params.contains(&pk) {
            return Err(crate::group::GroupError::InvalidElement(id).into());
        }
        for (peer, peer_pk) in &self.directory {
            client.keys.derive_shared(peer_pk, *peer)?;
        }
        for existing in self.clients.values_mut() {
            existing.keys.derive_shared(&pk, id)?;
        }
        self.directory.insert(id, pk);
        self.clients.insert(id, client);
        Ok(())
    }

    /// Revokes a client: everyone discards the key shared with it. Returns
    /// `false` (and changes nothing) if it was not registered.
    pub fn leave(&mut self, id: u64) -> bool {
        if self.clients.remove(&id).is_none() {
            return false;
        }
        self.directory.remove(&id);
        for c in self.clients.values_mut() {
            c.keys.discard_shared(id);
        }
        true
    }

    pub fn ids(&self) -> Vec<u64> {
        self.clients.keys().copied().collect()
    }

    pub fn get(&self, id: u64) -> Option<&ClientState> {
        self.clients.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut ClientState> {
        self.clients.get_mut(&id)
    }

    pub fn directory(&self) -> &BTreeMap<u64, GroupElement> {
        &self.directory
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}
