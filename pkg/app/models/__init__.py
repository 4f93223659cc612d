# Domain value types: model parameters, blocks, channels, clients