# Test suite for the BEAS federated ledger simulator