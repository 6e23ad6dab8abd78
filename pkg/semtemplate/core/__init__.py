# Core engine components: autodiff tape, neural fields, losses, config and run state
