# Ledger query API routes and endpoints