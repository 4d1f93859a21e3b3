# In-band metadata channel: encoder, channel model, decoder and trace tools
