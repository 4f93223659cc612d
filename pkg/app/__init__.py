# BEAS federated ledger simulator package