"""Build a 4-block chain, damage the store, and print the verification table.

    python3 scripts/tamper_demo.py
"""

import os
import tempfile
from pathlib import Path

from cidchain.cas import LocalStore
from cidchain.lightchain import Chain, short_cid


def show(title, chain, store):
    print(title)
    for v in chain.verify_chain(store):
        fetched = (v.fetched_hash or "-")[:12]
        print(f"  block {v.index}  {short_cid(v.cid):<18}  stored {v.stored_hash[:12]}  "
              f"fetched {fetched:<12}  {v.verdict.value}")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        store = LocalStore(root / "store")
        chain = Chain.create(root / "chain.jsonl")
        cids = []
        for i in range(4):
            cid, _ = store.put(os.urandom(4096))
            store.pin(cid)
            chain.save_to_chain(cid, store)
            cids.append(cid)
        show("untouched store:", chain, store)

        obj = store.object_path(cids[1])
        raw = bytearray(obj.read_bytes())
        raw[100] ^= 0xFF
        obj.write_bytes(bytes(raw))
        store.object_path(cids[3]).unlink()
        show("after flipping one byte of block 2 and deleting block 4:", chain, store)


if __name__ == "__main__":
    main()
