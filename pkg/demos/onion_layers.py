"""Wrap one message for a three-hop path and peel it the way relays do.

Run: python3 demos/onion_layers.py
"""

from onionbox.cell import Cell, Command, RelayCommand, RelayMessage, encode_cell
from onionbox.errors import UnwrapError
from onionbox.handshake import ClientHandshake, IdentityKey, server_handshake
from onionbox.onion import max_relay_data, onion_wrap, unwrap_backward, unwrap_layer, wrap_backward

# Three relays, each with a long-term identity.  The client runs one handshake per hop
# and ends up holding three session keys; each relay holds only its own.
relays = [IdentityKey.generate() for _ in range(3)]
client_keys, relay_keys = [], []
for identity in relays:
    hs = ClientHandshake(identity.public_bytes)
    created, relay_side = server_handshake(hs.create_payload(), identity)
    client_keys.append(hs.complete(created))
    relay_keys.append(relay_side)

msg = RelayMessage(1, RelayCommand.BEGIN, b"echo.test:7").encode()
onion = onion_wrap(msg, client_keys)
print(f"plaintext {len(msg)} octets -> onion {len(onion)} octets (17 per layer)")
print(f"a 3-hop circuit carries at most {max_relay_data(3)} data octets per cell")

# Every cell on the wire is 512 octets whatever it carries.
print(f"cell on the wire: {len(encode_cell(Cell(0x1234, Command.RELAY, onion)))} octets")

payload = onion
for hop, key in enumerate(relay_keys, start=1):
    layer = unwrap_layer(payload, key)
    print(f"hop {hop}: {layer.flag.name:7s} {len(payload)} -> {len(layer.body)} octets")
    payload = layer.body
print("exit reads:", RelayMessage.decode(payload))

# Peeling in the wrong order fails authentication at once.
try:
    unwrap_layer(onion_wrap(msg, [k.fresh_copy() for k in client_keys]), relay_keys[1].fresh_copy())
except UnwrapError as exc:
    print("middle key on the outer layer:", exc)

# Replies travel the other way: the exit seals, each relay on the way back adds a layer,
# and the client strips them all and learns which hop spoke.
reply = RelayMessage(1, RelayCommand.CONNECTED, bytes([127, 0, 0, 1])).encode()
back = wrap_backward(reply, [k.fresh_copy() for k in relay_keys], from_hop=3)
hop, plain = unwrap_backward(back, [k.fresh_copy() for k in client_keys])
print(f"reply from hop {hop}:", RelayMessage.decode(plain))
